"""Pure-numpy reference kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and array layouts; :mod:`shape_adaptor.kernels` picks one at import time.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x`` (n, c, h, w) into columns laid out as (c, kh, kw, n, oh, ow)."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols


def col2im(cols, h, w, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back into (n, c, h, w)."""
    c, kh, kw, n, oh, ow = cols.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                cols[:, i, j].transpose(1, 0, 2, 3)
            )
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def maxpool_forward(x, window, stride):
    """Max pooling. Returns the output and, per output cell, the flat
    index (within its h*w plane) of the first maximal input element."""
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    s = x.strides
    windows = as_strided(
        x,
        shape=(n, c, oh, ow, window, window),
        strides=(s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]),
        writeable=False,
    ).reshape(n, c, oh, ow, window * window)
    local = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, local[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * stride + local // window
    cols = np.arange(ow)[None, :] * stride + local % window
    return out, (rows * w + cols).astype(np.int64)


def maxpool_backward(grad, argidx, h, w):
    n, c = grad.shape[:2]
    plane = h * w
    offsets = (np.arange(n * c, dtype=np.int64) * plane).reshape(n, c, 1, 1)
    flat = (argidx + offsets).ravel()
    dx = np.bincount(flat, weights=grad.ravel(), minlength=n * c * plane)
    return dx.astype(grad.dtype).reshape(n, c, h, w)


def interp_matrix(idx0, idx1, lam, in_size, dtype):
    m = np.zeros((len(idx0), in_size), dtype=dtype)
    rows = np.arange(len(idx0))
    np.add.at(m, (rows, idx0), (1.0 - lam).astype(dtype))
    np.add.at(m, (rows, idx1), lam.astype(dtype))
    return m


def bilinear_forward(x, h0, h1, hl, w0, w1, wl):
    mh = interp_matrix(h0, h1, hl, x.shape[2], x.dtype)
    mw = interp_matrix(w0, w1, wl, x.shape[3], x.dtype)
    return np.ascontiguousarray(mh @ x @ mw.T)


def bilinear_backward(grad, in_h, in_w, h0, h1, hl, w0, w1, wl):
    mh = interp_matrix(h0, h1, hl, in_h, grad.dtype)
    mw = interp_matrix(w0, w1, wl, in_w, grad.dtype)
    return np.ascontiguousarray(mh.T @ grad @ mw)
