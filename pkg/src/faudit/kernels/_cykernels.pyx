# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: batched conv2d, max pooling, bilinear resize.

Same contracts as the numpy fallback in _pykernels; plain typed loops over
padded buffers, which beats the im2col path on small batches by skipping the
column-matrix materialisation.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def conv2d_forward(cnp.ndarray x_arr, cnp.ndarray k_arr, int stride, int pad):
    cdef double[:, :, :, ::1] xp = np.pad(
        x_arr, ((0, 0), (0, 0), (pad, pad), (pad, pad))
    ) if pad > 0 else np.ascontiguousarray(x_arr)
    cdef double[:, :, :, ::1] k = np.ascontiguousarray(k_arr)
    cdef Py_ssize_t n = xp.shape[0], ci = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t co = k.shape[0], kh = k.shape[2], kw = k.shape[3]
    cdef Py_ssize_t oh = (hp - kh) // stride + 1
    cdef Py_ssize_t ow = (wp - kw) // stride + 1
    out_arr = np.zeros((n, co, oh, ow))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, o, c, i, j, oy, ox
    cdef double kv
    for b in range(n):
        for o in range(co):
            for c in range(ci):
                for i in range(kh):
                    for j in range(kw):
                        kv = k[o, c, i, j]
                        for oy in range(oh):
                            for ox in range(ow):
                                out[b, o, oy, ox] += kv * xp[b, c, oy * stride + i, ox * stride + j]
    return out_arr


def conv2d_backward_input(cnp.ndarray gy_arr, cnp.ndarray k_arr, int stride, int pad,
                          Py_ssize_t h, Py_ssize_t w):
    cdef double[:, :, :, ::1] gy = np.ascontiguousarray(gy_arr)
    cdef double[:, :, :, ::1] k = np.ascontiguousarray(k_arr)
    cdef Py_ssize_t n = gy.shape[0], co = gy.shape[1]
    cdef Py_ssize_t oh = gy.shape[2], ow = gy.shape[3]
    cdef Py_ssize_t ci = k.shape[1], kh = k.shape[2], kw = k.shape[3]
    gxp_arr = np.zeros((n, ci, h + 2 * pad, w + 2 * pad))
    cdef double[:, :, :, ::1] gxp = gxp_arr
    cdef Py_ssize_t b, o, c, i, j, oy, ox
    cdef double kv
    for b in range(n):
        for o in range(co):
            for c in range(ci):
                for i in range(kh):
                    for j in range(kw):
                        kv = k[o, c, i, j]
                        for oy in range(oh):
                            for ox in range(ow):
                                gxp[b, c, oy * stride + i, ox * stride + j] += kv * gy[b, o, oy, ox]
    if pad == 0:
        return gxp_arr
    return np.ascontiguousarray(gxp_arr[:, :, pad:pad + h, pad:pad + w])


def conv2d_backward_kernel(cnp.ndarray gy_arr, cnp.ndarray x_arr,
                           Py_ssize_t kh, Py_ssize_t kw, int stride, int pad):
    cdef double[:, :, :, ::1] gy = np.ascontiguousarray(gy_arr)
    cdef double[:, :, :, ::1] xp = np.pad(
        x_arr, ((0, 0), (0, 0), (pad, pad), (pad, pad))
    ) if pad > 0 else np.ascontiguousarray(x_arr)
    cdef Py_ssize_t n = gy.shape[0], co = gy.shape[1]
    cdef Py_ssize_t oh = gy.shape[2], ow = gy.shape[3]
    cdef Py_ssize_t ci = xp.shape[1]
    gk_arr = np.zeros((co, ci, kh, kw))
    cdef double[:, :, :, ::1] gk = gk_arr
    cdef Py_ssize_t b, o, c, i, j, oy, ox
    cdef double acc
    for o in range(co):
        for c in range(ci):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for b in range(n):
                        for oy in range(oh):
                            for ox in range(ow):
                                acc += gy[b, o, oy, ox] * xp[b, c, oy * stride + i, ox * stride + j]
                    gk[o, c, i, j] = acc
    return gk_arr


def maxpool2d_forward(cnp.ndarray x_arr, int size, int stride):
    cdef double[:, :, :, ::1] x = np.ascontiguousarray(x_arr)
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - size) // stride + 1
    cdef Py_ssize_t ow = (w - size) // stride + 1
    y_arr = np.empty((n, c, oh, ow))
    idx_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef double[:, :, :, ::1] y = y_arr
    cdef long long[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, oy, ox, i, j, by, bx
    cdef double best, v
    cdef Py_ssize_t besti
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    by = oy * stride
                    bx = ox * stride
                    best = x[b, ch, by, bx]
                    besti = by * w + bx
                    for i in range(size):
                        for j in range(size):
                            v = x[b, ch, by + i, bx + j]
                            if v > best:
                                best = v
                                besti = (by + i) * w + (bx + j)
                    y[b, ch, oy, ox] = best
                    idx[b, ch, oy, ox] = besti
    return y_arr, idx_arr


def maxpool2d_backward(cnp.ndarray gy_arr, cnp.ndarray idx_arr, Py_ssize_t h, Py_ssize_t w):
    cdef double[:, :, :, ::1] gy = np.ascontiguousarray(gy_arr)
    cdef long long[:, :, :, ::1] idx = np.ascontiguousarray(idx_arr)
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1]
    cdef Py_ssize_t oh = gy.shape[2], ow = gy.shape[3]
    gx_arr = np.zeros((n, c, h * w))
    cdef double[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, ch, oy, ox
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    gx[b, ch, idx[b, ch, oy, ox]] += gy[b, ch, oy, ox]
    return gx_arr.reshape(n, c, h, w)


def bilinear_resize(cnp.ndarray src_arr, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef double[:, ::1] src = np.ascontiguousarray(src_arr)
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1]
    out_arr = np.empty((out_h, out_w))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t oy, ox, y0, x0, y0c, y1c, x0c, x1c
    cdef double sy, sx, wy, wx, top, bot
    for oy in range(out_h):
        sy = (oy + 0.5) * (<double> h / <double> out_h) - 0.5
        y0 = <Py_ssize_t> floor(sy)
        wy = sy - floor(sy)
        y0c = min(max(y0, 0), h - 1)
        y1c = min(max(y0 + 1, 0), h - 1)
        for ox in range(out_w):
            sx = (ox + 0.5) * (<double> w / <double> out_w) - 0.5
            x0 = <Py_ssize_t> floor(sx)
            wx = sx - floor(sx)
            x0c = min(max(x0, 0), w - 1)
            x1c = min(max(x0 + 1, 0), w - 1)
            top = src[y0c, x0c] * (1.0 - wx) + src[y0c, x1c] * wx
            bot = src[y1c, x0c] * (1.0 - wx) + src[y1c, x1c] * wx
            out[oy, ox] = top * (1.0 - wy) + bot * wy
    return out_arr
