"""Shape arithmetic: reshaping-factor maps, dimension propagation, the
module-count and initialisation heuristics, the memory penalty, and MACs.

Everything here is plain float/int arithmetic; nothing records gradients.
"""
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

EPSILON = 1e-4
SIMPLEX_TOL = 1e-9
FLOOR_TOL = 1e-6


class PenaltyRangeWarning(UserWarning):
    """A penalised shape parameter left (0, 1)."""


@dataclass(frozen=True)
class SearchSpace:
    r_min: float = 0.5
    r_max: float = 1.0
    dim_rule: str = "local"

    def __post_init__(self):
        if not 0 < self.r_min < self.r_max:
            raise ValueError(f"search space needs 0 < r_min < r_max, got ({self.r_min}, {self.r_max})")
        if self.dim_rule not in ("local", "global"):
            raise ValueError(f"dim_rule must be 'local' or 'global', got {self.dim_rule!r}")


class AlphaParam:
    """Raw shape parameter of one adaptor; ``alpha = sigmoid(raw)``."""

    def __init__(self, raw, space=None, rho=1.0, dtype=np.float32):
        self.raw = Tensor(np.asarray(raw, dtype=dtype), requires_grad=True, name="alpha")
        self.space = space or SearchSpace()
        self.rho = rho

    @property
    def alpha(self):
        z = float(self.raw.data)
        if z >= 0:
            return 1.0 / (1.0 + math.exp(-z))
        e = math.exp(z)
        return e / (1.0 + e)

    @property
    def penalized_alpha(self):
        return apply_penalty(self.alpha, self.rho, self.space, warn=False)

    @property
    def factor(self):
        """Effective reshaping factor ``s(alpha_rho)``."""
        return s_linear(self.penalized_alpha, self.space)

    def __repr__(self):
        return f"AlphaParam(raw={float(self.raw.data):.6g}, s={self.factor:.6g}, rho={self.rho:.6g})"


@dataclass
class ShapePlan:
    """Spatial dims through a network.

    ``dims[0]`` is the input dim and ``dims[k]`` the output of the k-th
    resizing layer. ``cell_dims[i]``, when known, is the dim entering cell
    ``i``. ``clamped`` lists resizing-layer indices (1-based, like ``dims``)
    whose raw value fell below 1.
    """

    input_dim: int
    factors: list
    dims: list
    cell_dims: list = field(default_factory=list)
    clamped: list = field(default_factory=list)

    @property
    def final_dim(self):
        return self.dims[-1]

    def to_dict(self):
        return {"input_dim": self.input_dim, "factors": list(self.factors), "dims": list(self.dims),
                "cell_dims": list(self.cell_dims), "clamped": list(self.clamped),
                "final_dim": self.final_dim}


def floor_dim(x):
    """Floor with a round-off allowance, so that a factor within ~1e-9 of 1
    (e.g. a saturated sigmoid) keeps the dim instead of losing a pixel."""
    return math.floor(x + FLOOR_TOL)


def round_half_away(x):
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def s_linear(alpha, space):
    return (space.r_max - space.r_min) * alpha + space.r_min


def check_simplex(weights):
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or np.any(w <= 0) or abs(w.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"weights must be positive and sum to 1 (tol {SIMPLEX_TOL}), got {w.tolist()}")
    return w


def s_generalized(alphas, factors, p):
    """Weighted generalised mean of ``factors``; ``p == 0`` is the geometric mean."""
    w = check_simplex(alphas)
    r = np.asarray(factors, dtype=np.float64)
    if r.shape != w.shape:
        raise ValueError("weights and factors differ in length")
    if np.any(r <= 0) or np.all(r == r[0]):
        raise ValueError("factors must be positive with at least two distinct values")
    if p == 1:
        # convex-combination form; for two branches this is s_linear bit for bit
        return float(r[0] + np.dot(w[1:], r[1:] - r[0]))
    logs = np.log(r)
    if p == 0:
        return float(np.exp(np.dot(w, logs)))
    if abs(p) < 1e-12:
        # log s_p = E[log r] + p/2 Var[log r] + O(p^2); p*log r may underflow here
        mean = np.dot(w, logs)
        return float(np.exp(mean + 0.5 * p * np.dot(w, (logs - mean) ** 2)))
    if abs(p) < 1e-3:
        # expm1/log1p keep small |p| accurate
        inner = np.dot(w, np.expm1(p * logs))
        return float(np.exp(np.log1p(inner) / p))
    return float(np.dot(w, r ** p) ** (1.0 / p))


def dims_local(input_dim, factors):
    dims, clamped = [int(input_dim)], []
    for k, r in enumerate(factors, start=1):
        d = floor_dim(dims[-1] * r)
        if d < 1:
            d = 1
            clamped.append(k)
        dims.append(d)
    return ShapePlan(int(input_dim), list(factors), dims, clamped=clamped)


def dims_global(input_dim, factors):
    dims, clamped, prod = [int(input_dim)], [], 1.0
    for k, r in enumerate(factors, start=1):
        prod *= r
        d = round_half_away(input_dim * prod)
        if d < 1:
            d = 1
            clamped.append(k)
        dims.append(d)
    return ShapePlan(int(input_dim), list(factors), dims, clamped=clamped)


def module_count(input_dim, d_last, r_min):
    if not 0 < r_min < 1:
        raise ValueError(f"r_min must lie in (0, 1), got {r_min}")
    if not input_dim >= d_last >= 1:
        raise ValueError("need input_dim >= d_last >= 1")
    # tolerance absorbs log round-off at exact powers, e.g. log(16)/log(2)
    return int(math.floor(math.log(input_dim / d_last) / math.log(1 / r_min) + 1e-9))


def init_alpha(input_dim, d_out, d_last, n, space):
    """Raw parameter giving ``input_dim * s**n == d_out`` at initialisation."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if d_last > d_out:
        return math.log(EPSILON)
    q = (d_out / input_dim) ** (1.0 / n)
    if q >= space.r_max:
        raise ValueError(f"per-module factor {q:.6g} >= r_max={space.r_max}: d_out unreachable")
    if q < space.r_min:
        raise ValueError(f"per-module factor {q:.6g} < r_min={space.r_min}: d_out unreachable")
    raw = math.log(-(q - space.r_min) / (q - space.r_max) + EPSILON)
    achieved = input_dim * s_linear(1 / (1 + math.exp(-raw)), space) ** n
    assert abs(achieved - d_out) <= 1e-3 * d_out, (achieved, d_out)
    return raw


def penalty_rho(d_limit, d_cout, n):
    if d_cout <= d_limit:
        return 1.0
    if n == 0:
        raise ValueError("cannot penalise a network without adaptors")
    return (d_limit / d_cout) ** (1.0 / n)


def apply_penalty(alpha, rho, space, warn=True):
    out = alpha * rho + space.r_min / (space.r_max - space.r_min) * (rho - 1)
    if warn and not 0 < out < 1:
        warnings.warn(f"penalised alpha {out:.6g} outside (0, 1)", PenaltyRangeWarning, stacklevel=2)
    return out


def estimate_macs(spec, plan):
    """Multiply-adds of conv layers and the classifier head.

    Pooling, normalisation, activations and interpolation count zero.
    """
    total = 0
    for cell, (c_in, c_out), d in zip(spec.cells, spec.cell_channels(), plan.cell_dims):
        if cell.kind == "conv_cell":
            total += 9 * c_in * c_out * d * d
        elif cell.kind == "residual_cell":
            total += 9 * c_in * c_out * d * d + 9 * c_out * c_out * d * d
            if spec.has_shortcut_conv(cell, c_in, c_out):
                total += c_in * c_out * d * d
        elif cell.kind == "classifier_head":
            total += c_in * c_out
    return total
