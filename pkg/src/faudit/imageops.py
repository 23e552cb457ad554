"""Deterministic 2-D image helpers: blur, resize, augmentation transforms."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .kernels import bilinear_resize

__all__ = [
    "bilinear_resize",
    "nearest_resize",
    "gaussian_blur",
    "rotate_nearest",
    "translate",
    "gaussian_kernel1d",
]


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps truncated at 3 sigma."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * sigma**2))
    return k / k.sum()


def _convolve_axis(plane: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    radius = (len(taps) - 1) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (radius, radius)
    padded = np.pad(plane, pad, mode="reflect")
    windows = sliding_window_view(padded, len(taps), axis=axis)
    return np.tensordot(windows, taps, axes=([-1], [0]))


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of [h,w] or [c,h,w]; reflect boundary."""
    taps = gaussian_kernel1d(sigma)
    arr = np.asarray(image, dtype=np.float64)
    single = arr.ndim == 2
    planes = arr[None] if single else arr
    out = np.empty_like(planes)
    for i, plane in enumerate(planes):
        out[i] = _convolve_axis(_convolve_axis(plane, taps, 0), taps, 1)
    return out[0] if single else out


def nearest_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize with half-pixel centers."""
    h, w = src.shape
    ys = np.minimum((np.arange(out_h) + 0.5) * (h / out_h), h - 1e-9).astype(np.int64)
    xs = np.minimum((np.arange(out_w) + 0.5) * (w / out_w), w - 1e-9).astype(np.int64)
    return src[np.ix_(ys, xs)]


def _plane_apply(image: np.ndarray, fn) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return fn(arr)
    return np.stack([fn(p) for p in arr])


def rotate_nearest(image: np.ndarray, degrees: float, fill: float = 0.0) -> np.ndarray:
    """Rotate about the image center with nearest-neighbour sampling."""

    def rot(plane: np.ndarray) -> np.ndarray:
        h, w = plane.shape
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        theta = math.radians(degrees)
        cos, sin = math.cos(theta), math.sin(theta)
        ys, xs = np.mgrid[0:h, 0:w]
        dy, dx = ys - cy, xs - cx
        # inverse map: sample the source at the un-rotated location
        sy = np.round(cy + cos * dy + sin * dx).astype(np.int64)
        sx = np.round(cx - sin * dy + cos * dx).astype(np.int64)
        valid = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
        out = np.full_like(plane, fill)
        out[valid] = plane[sy[valid], sx[valid]]
        return out

    return _plane_apply(image, rot)


def translate(image: np.ndarray, dy: int, dx: int, fill: float = 0.0) -> np.ndarray:
    """Integer pixel shift (positive = down/right), fill exposed border."""

    def shift(plane: np.ndarray) -> np.ndarray:
        h, w = plane.shape
        out = np.full_like(plane, fill)
        src_y = slice(max(0, -dy), min(h, h - dy))
        src_x = slice(max(0, -dx), min(w, w - dx))
        dst_y = slice(max(0, dy), min(h, h + dy))
        dst_x = slice(max(0, dx), min(w, w + dx))
        out[dst_y, dst_x] = plane[src_y, src_x]
        return out

    return _plane_apply(image, shift)
