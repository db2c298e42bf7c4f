"""A small reverse-mode autodiff engine over numpy arrays.

Only the operators shape adaptor networks need are provided. Feature maps
are rank-4 ``(batch, channel, height, width)``; scalars, vectors and
matrices appear for shape parameters, the classifier head and the loss.
Every op preserves the floating dtype of its inputs, so the same graph runs
in float32 for training and in float64 for gradient checking.
"""
import contextlib

import numpy as np

from . import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


class ShapeError(ValueError):
    """Raised when operand dimensions disagree. ``axis`` names the culprit."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.dtype)

    # -- graph ---------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        other = _lift(other, self.dtype)
        return _make(self.data + other.data, (self, other),
                     lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_lift(other, self.dtype))

    def __rsub__(self, other):
        return _lift(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _lift(other, self.dtype)
        a, b = self.data, other.data
        return _make(a * b, (self, other),
                     lambda g: (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)))

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return self * (1.0 / scalar)

    def __getitem__(self, index):
        def back(g):
            full = np.zeros_like(self.data)
            full[index] = g
            return (full,)
        return _make(self.data[index], (self,), back)

    def sum(self):
        return _make(self.data.sum(), (self,), lambda g: (np.broadcast_to(g, self.shape).copy(),))

    def mean(self):
        n = self.data.size
        return _make(self.data.mean(), (self,),
                     lambda g: (np.broadcast_to(g / n, self.shape).astype(self.dtype),))

    def reshape(self, *shape):
        return _make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(self.shape),))


def _lift(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor(data, dtype=data.dtype if isinstance(data, np.ndarray) else None)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _check_rank4(x, what="input"):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank-4 (n, c, h, w), got shape {x.shape}", axis="rank")


# ---------------------------------------------------------------------------
# elementwise

def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x):
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _make(s, (x,), lambda g: (g * s * (1 - s),))


def softmax(x):
    """Softmax of a vector."""
    z = x.data - x.data.max()
    e = np.exp(z)
    p = e / e.sum()
    return _make(p, (x,), lambda g: (p * (g - (g * p).sum()),))


# ---------------------------------------------------------------------------
# spatial operators

def conv2d(x, weight, bias=None, stride=1, padding=0):
    _check_rank4(x)
    n, c_in, h, w = x.shape
    if weight.ndim != 4:
        raise ShapeError(f"kernel must be rank-4, got {weight.shape}", axis="rank")
    c_out, wc_in, kh, kw = weight.shape
    if wc_in != c_in:
        raise ShapeError(f"channel mismatch: input has {c_in}, kernel expects {wc_in}", axis="channel")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if h + 2 * padding < kh:
        raise ShapeError(f"kernel height {kh} exceeds padded input height", axis="height")
    if w + 2 * padding < kw:
        raise ShapeError(f"kernel width {kw} exceeds padded input width", axis="width")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}", axis="channel")

    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    oh, ow = cols.shape[4], cols.shape[5]
    cols2d = cols.reshape(c_in * kh * kw, n * oh * ow)
    w2d = weight.data.reshape(c_out, -1)
    out = (w2d @ cols2d).reshape(c_out, n, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def back(g):
        g2d = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        dw = (g2d @ cols2d.T).reshape(weight.shape) if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (w2d.T @ g2d).reshape(cols.shape)
            dx = kernels.col2im(dcols, h, w, stride, padding)
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back)


def pool2d(x, mode="max", window=2, stride=None):
    _check_rank4(x)
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window > h:
        raise ShapeError(f"pool window {window} larger than input height {h}", axis="height")
    if window > w:
        raise ShapeError(f"pool window {window} larger than input width {w}", axis="width")
    if mode == "max":
        out, argidx = kernels.maxpool_forward(x.data, window, stride)
        return _make(out, (x,), lambda g: (kernels.maxpool_backward(g, argidx, h, w),))
    if mode == "avg":
        flat = x.data.reshape(n * c, 1, h, w)
        cols = kernels.im2col(flat, window, window, stride, 0)
        out = cols.mean(axis=(0, 1, 2)).reshape(n, c, cols.shape[4], cols.shape[5])
        area = window * window

        def back(g):
            share = (g.reshape(1, 1, 1, n * c, *g.shape[2:]) / area).astype(x.dtype)
            dcols = np.ascontiguousarray(np.broadcast_to(share, cols.shape))
            return (kernels.col2im(dcols, h, w, stride, 0).reshape(n, c, h, w),)

        return _make(out.astype(x.dtype), (x,), back)
    raise ValueError(f"unknown pooling mode {mode!r}")


def bilinear_resize(x, out_h, out_w):
    """Bilinear interpolation with half-pixel centres and edge clamping.

    Resizing to the input's own dims returns ``x`` unchanged.
    """
    _check_rank4(x)
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target dims must be >= 1, got {out_h}x{out_w}", axis="height" if out_h < 1 else "width")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x
    out = kernels.bilinear_forward(x.data, out_h, out_w)
    return _make(out, (x,), lambda g: (kernels.bilinear_backward(g, h, w),))


def global_avg_pool(x):
    _check_rank4(x)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return _make(out, (x,), lambda g: (
        np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.dtype),))


def affine(x, weight, bias):
    """``y = x W^T + b`` with ``x`` flattened to (n, features)."""
    n = x.shape[0]
    flat = x.reshape(n, -1) if x.ndim != 2 else x
    features = flat.shape[1]
    if weight.ndim != 2 or weight.shape[1] != features:
        raise ShapeError(f"weight expects {weight.shape[-1]} features, input has {features}", axis="feature")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias must have shape ({weight.shape[0]},), got {bias.shape}", axis="feature")
    a, wt = flat.data, weight.data
    out = a @ wt.T + bias.data

    def back(g):
        return g @ wt, g.T @ a, g.sum(axis=0)

    return _make(out, (flat, weight, bias), back)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training=True,
                momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalisation over (n, h, w).

    ``running_mean`` and ``running_var`` are plain arrays, updated in place
    in training mode (unbiased variance, as is conventional).
    """
    _check_rank4(x)
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ShapeError(f"{name} has shape {t.shape}, input has {c} channels", axis="channel")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError("running statistics do not match channel count", axis="channel")
    g_ = gamma.data.reshape(1, c, 1, 1)
    axes = (0, 2, 3)
    if training:
        m = x.data.size // c
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        m = None
        mu, var = running_mean, running_var
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(1, c, 1, 1)
    xhat = (x.data - mu.astype(x.dtype).reshape(1, c, 1, 1)) * invstd
    out = g_ * xhat + beta.data.reshape(1, c, 1, 1)

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        if training:
            dx = invstd / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                               - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * invstd
        return dx, dgamma, dbeta

    return _make(out.astype(x.dtype), (x, gamma, beta), back)


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (n, classes), got {logits.shape}", axis="rank")
    n, classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape}", axis="batch")
    if n and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return ((g / n) * p).astype(logits.dtype),

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), back)
