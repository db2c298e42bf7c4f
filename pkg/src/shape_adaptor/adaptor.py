"""Shape adaptor modules.

A two-branch adaptor mixes two resized copies of a feature map,

    out = scale * [(1 - a) * G(F_lo(x)) + a * G(F_hi(x))],

where ``G`` is bilinear resizing to the target dim implied by the learnable
factor ``s(a)``. Output dims are treated as constants when differentiating:
the shape parameter receives gradient only through the mixing weights.
"""

import numpy as np

from . import calculus
from .calculus import AlphaParam, SearchSpace
from .tensor import ShapeError, Tensor, bilinear_resize, pool2d, sigmoid, softmax


def identity(x):
    return x


def max_pool_2x2(x):
    # a collapsed 1-pixel map cannot be pooled; the resize step handles it
    if x.shape[2] < 2 or x.shape[3] < 2:
        return x
    return pool2d(x, "max", 2, 2)


def _as_hw(target_dim):
    if isinstance(target_dim, (tuple, list)):
        h, w = target_dim
    else:
        h = w = target_dim
    h, w = int(h), int(w)
    if h < 1 or w < 1:
        raise ShapeError(f"target dim must be >= 1, got {target_dim}", axis="height" if h < 1 else "width")
    return h, w


def local_target(x, factor):
    """Local-type target: floor each spatial dim by ``factor``, clamped to 1."""
    return (max(1, calculus.floor_dim(x.shape[2] * factor)), max(1, calculus.floor_dim(x.shape[3] * factor)))


class ShapeAdaptor:
    """Two-branch adaptor.

    ``cell_kind`` is ``"conv_cell"`` (max-pool / identity branches, unit
    weights), ``"residual_cell"`` (shortcut / body branches, doubled
    weights) or ``"general"`` (caller-supplied branches).
    """

    def __init__(self, alpha=None, branch_lo=max_pool_2x2, branch_hi=identity,
                 cell_kind="conv_cell", weight_scale=None):
        self.alpha = alpha if alpha is not None else AlphaParam(0.0)
        space = self.alpha.space
        if not space.r_min < space.r_max:
            raise ValueError("branch factors must satisfy r_lo < r_hi")
        self.branch_lo = branch_lo
        self.branch_hi = branch_hi
        self.cell_kind = cell_kind
        if weight_scale is None:
            weight_scale = 2.0 if cell_kind == "residual_cell" else 1.0
        self.weight_scale = weight_scale

    @property
    def space(self):
        return self.alpha.space

    @property
    def factor(self):
        return self.alpha.factor

    def parameters(self):
        return [self.alpha.raw]

    def mixing_weights(self):
        """``(w_lo, w_hi)`` as differentiable scalars, penalty applied."""
        a = sigmoid(self.alpha.raw)
        rho = self.alpha.rho
        if rho != 1.0:
            space = self.space
            a = a * rho + space.r_min / (space.r_max - space.r_min) * (rho - 1)
        return (1 - a) * self.weight_scale, a * self.weight_scale

    def __call__(self, x, target_dim=None):
        return shape_adaptor_forward(self, x, target_dim)


def shape_adaptor_forward(module, x, target_dim=None, lo=None, hi=None):
    """Mix both branches at ``target_dim``.

    ``lo``/``hi`` may carry precomputed branch outputs; otherwise the
    module's branch callables are applied to ``x``. Without an explicit
    target the local rule is used on ``x``'s dims.
    """
    if target_dim is None:
        target_dim = local_target(x, module.factor)
    th, tw = _as_hw(target_dim)
    lo = module.branch_lo(x) if lo is None else lo
    hi = module.branch_hi(x) if hi is None else hi
    w_lo, w_hi = module.mixing_weights()
    return w_lo * bilinear_resize(lo, th, tw) + w_hi * bilinear_resize(hi, th, tw)


def conv_cell_forward(module, body_out, target_dim=None):
    """Adaptor stage of a convolutional cell; ``body_out`` is the output
    of the cell's conv/bn/relu body."""
    if module.cell_kind != "conv_cell":
        raise ValueError(f"expected a conv_cell adaptor, got {module.cell_kind}")
    return shape_adaptor_forward(module, body_out, target_dim,
                                 lo=max_pool_2x2(body_out), hi=body_out)


def residual_cell_forward(module, x, shortcut, body, target_dim=None):
    """``2(1-a) G(shortcut(x)) + 2a G(body(x))`` (pre-activation)."""
    if module.cell_kind != "residual_cell":
        raise ValueError(f"expected a residual_cell adaptor, got {module.cell_kind}")
    return shape_adaptor_forward(module, x, target_dim, lo=shortcut(x), hi=body(x))


def default_branch(factor):
    """Resizing op for a fixed factor: identity, integer max-pool, or bilinear."""
    if factor == 1:
        return identity
    inv = 1.0 / factor
    if factor < 1 and abs(inv - round(inv)) < 1e-12:
        k = int(round(inv))

        def pool(x):
            if x.shape[2] < k or x.shape[3] < k:
                return bilinear_resize(x, *local_target(x, factor))
            return pool2d(x, "max", k, k)
        return pool

    def resize(x):
        return bilinear_resize(x, *local_target(x, factor))
    return resize


class GeneralAdaptor:
    """K-branch adaptor; softmax of raw weights puts them on the simplex and
    the reshaping factor is their weighted generalised mean."""

    def __init__(self, factors, branches=None, p=1.0, raw_weights=None, dtype=np.float32):
        factors = [float(r) for r in factors]
        if len(factors) < 2:
            raise ValueError("a general adaptor needs K >= 2 branches")
        if any(r <= 0 for r in factors) or len(set(factors)) < 2:
            raise ValueError("factors must be positive with at least two distinct values")
        self.factors = factors
        self.branches = branches or [default_branch(r) for r in factors]
        if len(self.branches) != len(factors):
            raise ValueError("one branch per factor required")
        self.p = p
        raw = np.zeros(len(factors)) if raw_weights is None else np.asarray(raw_weights)
        self.raw = Tensor(raw.astype(dtype), requires_grad=True, name="alpha_k")

    def parameters(self):
        return [self.raw]

    @property
    def weights(self):
        z = self.raw.data.astype(np.float64)
        e = np.exp(z - z.max())
        return e / e.sum()

    @property
    def factor(self):
        return calculus.s_generalized(self.weights, self.factors, self.p)

    @property
    def space(self):
        return SearchSpace(min(self.factors), max(self.factors))

    def __call__(self, x, target_dim=None):
        return general_adaptor_forward(self, x, target_dim)


def general_adaptor_forward(gadaptor, x, target_dim=None):
    if target_dim is None:
        target_dim = local_target(x, gadaptor.factor)
    th, tw = _as_hw(target_dim)
    weights = softmax(gadaptor.raw)
    calculus.check_simplex(weights.data.astype(np.float64) / weights.data.sum())
    out = None
    for i, branch in enumerate(gadaptor.branches):
        term = weights[i] * bilinear_resize(branch(x), th, tw)
        out = term if out is None else out + term
    return out
