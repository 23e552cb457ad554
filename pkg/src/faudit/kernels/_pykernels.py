"""Pure numpy kernels: batched conv2d, max pooling, bilinear resize.

Reference implementations for the compiled extension; selected at import time
by :mod:`faudit.kernels` when the extension is unavailable.  All arrays are
C-contiguous float64.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad_hw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp, kh, kw, stride):
    """[n,ci,hp,wp] -> ([n, oh*ow, ci*kh*kw], oh, ow)."""
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, ci, oh, ow = v.shape[:4]
    cols = v.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, ci * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def conv2d_forward(x, k, stride, pad):
    """Cross-correlate x [n,ci,h,w] with k [co,ci,kh,kw] -> [n,co,oh,ow]."""
    n = x.shape[0]
    co, _, kh, kw = k.shape
    cols, oh, ow = _im2col(_pad_hw(x, pad), kh, kw, stride)
    y = cols @ k.reshape(co, -1).T  # [n, oh*ow, co]
    return np.ascontiguousarray(y.transpose(0, 2, 1).reshape(n, co, oh, ow))


def conv2d_backward_input(gy, k, stride, pad, h, w):
    """Gradient w.r.t. x given gy [n,co,oh,ow]."""
    n, co, oh, ow = gy.shape
    _, ci, kh, kw = k.shape
    gcols = gy.reshape(n, co, oh * ow).transpose(0, 2, 1) @ k.reshape(co, -1)
    g6 = gcols.reshape(n, oh, ow, ci, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gxp = np.zeros((n, ci, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g6[
                :, :, i, j
            ]
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w])


def conv2d_backward_kernel(gy, x, kh, kw, stride, pad):
    """Gradient w.r.t. k given gy [n,co,oh,ow] and the forward input x."""
    n, co, oh, ow = gy.shape
    ci = x.shape[1]
    cols, _, _ = _im2col(_pad_hw(x, pad), kh, kw, stride)
    gk = np.matmul(gy.reshape(n, co, oh * ow), cols).sum(axis=0)
    return np.ascontiguousarray(gk.reshape(co, ci, kh, kw))


def maxpool2d_forward(x, size, stride):
    """Max pool x [n,c,h,w]; returns (y, argmax flat index into h*w)."""
    n, c, h, w = x.shape
    v = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    n_, c_, oh, ow = v.shape[:4]
    flat = v.reshape(n, c, oh, ow, size * size)
    local = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    oy = np.arange(oh)[:, None] * stride
    ox = np.arange(ow)[None, :] * stride
    rows = oy[None, None] + local // size
    cols = ox[None, None] + local % size
    idx = rows * w + cols
    return np.ascontiguousarray(y), np.ascontiguousarray(idx.astype(np.int64))


def maxpool2d_backward(gy, idx, h, w):
    """Scatter gy [n,c,oh,ow] back through the recorded argmax indices."""
    n, c = gy.shape[:2]
    gx = np.zeros((n, c, h * w))
    np.add.at(
        gx,
        (
            np.arange(n)[:, None, None, None],
            np.arange(c)[None, :, None, None],
            idx,
        ),
        gy,
    )
    return gx.reshape(n, c, h, w)


def bilinear_resize(src, out_h, out_w):
    """Resize a 2-D map with half-pixel-center sampling and clamped edges."""
    h, w = src.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = ys - y0
    wx = xs - x0
    y0c = np.clip(y0.astype(np.int64), 0, h - 1)
    y1c = np.clip(y0.astype(np.int64) + 1, 0, h - 1)
    x0c = np.clip(x0.astype(np.int64), 0, w - 1)
    x1c = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    top = src[np.ix_(y0c, x0c)] * (1 - wx) + src[np.ix_(y0c, x1c)] * wx
    bot = src[np.ix_(y1c, x0c)] * (1 - wx) + src[np.ix_(y1c, x1c)] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]
