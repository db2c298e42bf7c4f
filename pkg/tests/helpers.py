"""Shared test utilities: central-difference gradient checking."""
import numpy as np

from shape_adaptor.tensor import Tensor

FD_STEP = 1e-5
FD_RTOL = 1e-4


def relative_error(a, b):
    """``|a - b| / max(|a|, |b|)`` in the 2-norm (0 when both vanish)."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, t, h=FD_STEP):
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``t``."""
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(f().data)
        flat[i] = old - h
        down = float(f().data)
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return grad


def gradcheck(build, tensors, h=FD_STEP, seed=0):
    """Compare analytic and numeric gradients of ``sum(build() * R)``.

    ``build`` maps nothing to an output Tensor computed from ``tensors``
    (float64 leaves with ``requires_grad``); ``R`` is a fixed random
    projection so every output entry contributes. Returns the worst
    relative error over ``tensors``.
    """
    probe = build()
    proj = Tensor(np.random.default_rng(seed).standard_normal(probe.shape))

    def loss():
        out = build()
        return (out * proj).sum()

    for t in tensors:
        t.grad = None
    loss().backward()
    analytic = [np.array(t.grad, dtype=np.float64) for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        worst = max(worst, relative_error(a, numeric_grad(loss, t, h)))
    return worst


def leaf(shape, seed=0, scale=1.0, low=None):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal(shape) * scale if low is None else rng.uniform(low, low + scale, shape)
    return Tensor(data.astype(np.float64), requires_grad=True)
