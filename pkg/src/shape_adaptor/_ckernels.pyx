# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; same contracts as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


cdef inline void _valid_cols(Py_ssize_t j, Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t w,
                             Py_ssize_t ow, Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output columns xx with 0 <= xx*stride + j - pad < w
    cdef Py_ssize_t a = pad - j
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    cdef Py_ssize_t b = w - 1 + pad - j
    hi[0] = 0 if b < 0 else b // stride + 1
    if hi[0] > ow:
        hi[0] = ow
    if lo[0] > hi[0]:
        lo[0] = hi[0]


def im2col(floating[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((c, kh, kw, n, oh, ow), dtype=dtype)
    cdef floating[:, :, :, :, :, ::1] cols = out
    cdef floating* src = &x[0, 0, 0, 0]
    cdef floating* dst = &cols[0, 0, 0, 0, 0, 0]
    cdef floating* row
    cdef floating* srow
    cdef Py_ssize_t ci, i, j, b, y, xx, sy, lo, hi, off
    with nogil:
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    _valid_cols(j, stride, pad, w, ow, &lo, &hi)
                    off = j - pad
                    for b in range(n):
                        for y in range(oh):
                            row = dst + ((((ci * kh + i) * kw + j) * n + b) * oh + y) * ow
                            sy = y * stride + i - pad
                            if sy < 0 or sy >= h:
                                for xx in range(ow):
                                    row[xx] = 0
                                continue
                            srow = src + ((b * c + ci) * h + sy) * w
                            for xx in range(lo):
                                row[xx] = 0
                            if stride == 1:
                                for xx in range(lo, hi):
                                    row[xx] = srow[xx + off]
                            else:
                                for xx in range(lo, hi):
                                    row[xx] = srow[xx * stride + off]
                            for xx in range(hi, ow):
                                row[xx] = 0
    return out


def col2im(floating[:, :, :, :, :, ::1] cols, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t c = cols.shape[0], kh = cols.shape[1], kw = cols.shape[2]
    cdef Py_ssize_t n = cols.shape[3], oh = cols.shape[4], ow = cols.shape[5]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef floating* src = &cols[0, 0, 0, 0, 0, 0]
    cdef floating* dst = &dx[0, 0, 0, 0]
    cdef floating* row
    cdef floating* drow
    cdef Py_ssize_t ci, i, j, b, y, xx, sy, lo, hi, off
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        _valid_cols(j, stride, pad, w, ow, &lo, &hi)
                        off = j - pad
                        for y in range(oh):
                            sy = y * stride + i - pad
                            if sy < 0 or sy >= h:
                                continue
                            row = src + ((((ci * kh + i) * kw + j) * n + b) * oh + y) * ow
                            drow = dst + ((b * c + ci) * h + sy) * w
                            if stride == 1:
                                for xx in range(lo, hi):
                                    drow[xx + off] += row[xx]
                            else:
                                for xx in range(lo, hi):
                                    drow[xx * stride + off] += row[xx]
    return out


def maxpool_forward(floating[:, :, :, ::1] x, Py_ssize_t window, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - window) // stride + 1
    cdef Py_ssize_t ow = (w - window) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, oh, ow), dtype=dtype)
    idx_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ci, y, xx, i, j, sy, sx, best_i
    cdef floating best, v
    with nogil:
        for b in range(n):
            for ci in range(c):
                for y in range(oh):
                    for xx in range(ow):
                        sy = y * stride
                        sx = xx * stride
                        best = x[b, ci, sy, sx]
                        best_i = sy * w + sx
                        for i in range(window):
                            for j in range(window):
                                v = x[b, ci, sy + i, sx + j]
                                # strict '>' keeps the first maximum in row-major order
                                if v > best:
                                    best = v
                                    best_i = (sy + i) * w + sx + j
                        out[b, ci, y, xx] = best
                        idx[b, ci, y, xx] = best_i
    return out_arr, idx_arr


def maxpool_backward(floating[:, :, :, ::1] grad, cnp.int64_t[:, :, :, ::1] argidx,
                     Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1]
    cdef Py_ssize_t oh = grad.shape[2], ow = grad.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ci, y, xx, k
    with nogil:
        for b in range(n):
            for ci in range(c):
                for y in range(oh):
                    for xx in range(ow):
                        k = argidx[b, ci, y, xx]
                        dx[b, ci, k // w, k % w] += grad[b, ci, y, xx]
    return out


def bilinear_forward(floating[:, :, :, ::1] x,
                     cnp.int64_t[::1] h0, cnp.int64_t[::1] h1, double[::1] hl,
                     cnp.int64_t[::1] w0, cnp.int64_t[::1] w1, double[::1] wl):
    # separable: interpolate every input row along width, then mix rows
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], in_h = x.shape[2], in_w = x.shape[3]
    cdef Py_ssize_t oh = h0.shape[0], ow = w0.shape[0]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, oh, ow), dtype=dtype)
    tmp_arr = np.empty((in_h, ow), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef floating[:, ::1] tmpv = tmp_arr
    cdef floating* src = &x[0, 0, 0, 0]
    cdef floating* dst = &out[0, 0, 0, 0]
    cdef floating* tmp = &tmpv[0, 0]
    cdef floating* plane
    cdef floating* row
    cdef floating* t0
    cdef floating* t1
    cdef floating* orow
    cdef Py_ssize_t p, r, y, xx
    cdef floating lx, ly
    with nogil:
        for p in range(n * c):
            plane = src + p * in_h * in_w
            for r in range(in_h):
                row = plane + r * in_w
                for xx in range(ow):
                    lx = <floating>wl[xx]
                    tmp[r * ow + xx] = (1 - lx) * row[w0[xx]] + lx * row[w1[xx]]
            for y in range(oh):
                ly = <floating>hl[y]
                t0 = tmp + h0[y] * ow
                t1 = tmp + h1[y] * ow
                orow = dst + (p * oh + y) * ow
                for xx in range(ow):
                    orow[xx] = (1 - ly) * t0[xx] + ly * t1[xx]
    return out_arr


def bilinear_backward(floating[:, :, :, ::1] grad, Py_ssize_t in_h, Py_ssize_t in_w,
                      cnp.int64_t[::1] h0, cnp.int64_t[::1] h1, double[::1] hl,
                      cnp.int64_t[::1] w0, cnp.int64_t[::1] w1, double[::1] wl):
    # transpose of the forward: scatter rows, then scatter along width
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1]
    cdef Py_ssize_t oh = grad.shape[2], ow = grad.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, in_h, in_w), dtype=dtype)
    tmp_arr = np.empty((in_h, ow), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef floating[:, ::1] tmpv = tmp_arr
    cdef floating* src = &grad[0, 0, 0, 0]
    cdef floating* dst = &dx[0, 0, 0, 0]
    cdef floating* tmp = &tmpv[0, 0]
    cdef floating* grow
    cdef floating* t0
    cdef floating* t1
    cdef floating* drow
    cdef floating* trow
    cdef Py_ssize_t p, r, y, xx
    cdef floating lx, ly, g
    with nogil:
        for p in range(n * c):
            for r in range(in_h * ow):
                tmp[r] = 0
            for y in range(oh):
                ly = <floating>hl[y]
                grow = src + (p * oh + y) * ow
                t0 = tmp + h0[y] * ow
                t1 = tmp + h1[y] * ow
                for xx in range(ow):
                    t0[xx] += (1 - ly) * grow[xx]
                    t1[xx] += ly * grow[xx]
            for r in range(in_h):
                trow = tmp + r * ow
                drow = dst + (p * in_h + r) * in_w
                for xx in range(ow):
                    lx = <floating>wl[xx]
                    g = trow[xx]
                    drow[w0[xx]] += (1 - lx) * g
                    drow[w1[xx]] += lx * g
    return out
