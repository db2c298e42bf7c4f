"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
reference kernels are used. Set ``SHAPE_ADAPTOR_KERNELS=python`` to force
the fallback.
"""
import contextlib
import logging
import os

import numpy as np

from . import _pykernels

logger = logging.getLogger(__name__)

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def available_backends():
    return sorted(_BACKENDS)


def _initial_backend():
    wanted = os.environ.get("SHAPE_ADAPTOR_KERNELS", "").strip().lower()
    if wanted:
        if wanted not in _BACKENDS:
            logger.warning("kernel backend %r unavailable, using fallback", wanted)
            return "cython" if "cython" in _BACKENDS else "python"
        return wanted
    return "cython" if "cython" in _BACKENDS else "python"


BACKEND = _initial_backend()
_impl = _BACKENDS[BACKEND]


def set_backend(name):
    global BACKEND, _impl
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    BACKEND = name
    _impl = _BACKENDS[name]


@contextlib.contextmanager
def use_backend(name):
    previous = BACKEND
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _c(a):
    return np.ascontiguousarray(a)


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(_c(x), kh, kw, stride, pad)


def col2im(cols, h, w, stride, pad):
    return _impl.col2im(_c(cols), h, w, stride, pad)


def maxpool_forward(x, window, stride):
    return _impl.maxpool_forward(_c(x), window, stride)


def maxpool_backward(grad, argidx, h, w):
    return _impl.maxpool_backward(_c(grad), _c(argidx), h, w)


def bilinear_coords(in_size, out_size):
    """Half-pixel source coordinates with edge clamping.

    Returns ``(lo, hi, frac)`` so that output sample ``k`` reads
    ``(1 - frac[k]) * in[lo[k]] + frac[k] * in[hi[k]]``.
    """
    dst = np.arange(out_size, dtype=np.float64)
    src = (dst + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, src - lo


def bilinear_forward(x, out_h, out_w):
    h0, h1, hl = bilinear_coords(x.shape[2], out_h)
    w0, w1, wl = bilinear_coords(x.shape[3], out_w)
    return _impl.bilinear_forward(_c(x), h0, h1, hl, w0, w1, wl)


def bilinear_backward(grad, in_h, in_w):
    h0, h1, hl = bilinear_coords(in_h, grad.shape[2])
    w0, w1, wl = bilinear_coords(in_w, grad.shape[3])
    return _impl.bilinear_backward(_c(grad), in_h, in_w, h0, h1, hl, w0, w1, wl)
