"""Declarative network specs and the trainable models built from them.

A network is a sequence of cells (VGG-style conv cells or residual cells)
ending in a classifier head. A cell may host one resizing stage: a learnable
shape adaptor, or a fixed resizing layer with a set factor. Which of the two
is used depends on the network spec's ``mode``:

``shape_adaptor``  adaptors placed uniformly, no fixed resizing
``human_fixed``    fixed factor-0.5 resizing at hand-picked cells
``random_fixed``   fixed resizing with arbitrary per-layer factors
``autosc``         a human design plus shrink-only global-type adaptors
"""
import copy
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import calculus
from .adaptor import ShapeAdaptor, conv_cell_forward, max_pool_2x2, residual_cell_forward
from .calculus import AlphaParam, SearchSpace, ShapePlan
from .tensor import (Tensor, affine, batchnorm2d, bilinear_resize, conv2d, global_avg_pool,
                     relu)

logger = logging.getLogger(__name__)

CELL_KINDS = ("conv_cell", "residual_cell", "classifier_head")
MODES = ("shape_adaptor", "human_fixed", "autosc", "random_fixed")
SPEC_VERSION = 1


class SpecError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid network spec: " + "; ".join(self.violations))


@dataclass
class CellSpec:
    kind: str
    channels_out: int
    has_adaptor: bool = False
    resize_factor: float = None  # fixed resizing layer after the cell

    @property
    def resizes(self):
        return self.has_adaptor or self.resize_factor is not None


@dataclass
class NetworkSpec:
    cells: list
    input_channels: int = 3
    input_dim: int = 32
    search_space: SearchSpace = field(default_factory=SearchSpace)
    mode: str = "shape_adaptor"
    width_multiplier: float = 1.0

    @property
    def dim_rule(self):
        return self.search_space.dim_rule

    @property
    def adaptor_count(self):
        return sum(c.has_adaptor for c in self.cells)

    def body_cells(self):
        return [c for c in self.cells if c.kind != "classifier_head"]

    def violations(self):
        out = []
        heads = [i for i, c in enumerate(self.cells) if c.kind == "classifier_head"]
        if len(heads) != 1 or heads[0] != len(self.cells) - 1:
            out.append("classifier_head must appear exactly once, as the last cell")
        if self.mode not in MODES:
            out.append(f"unknown mode {self.mode!r}")
        for i, c in enumerate(self.cells):
            if c.kind not in CELL_KINDS:
                out.append(f"cell {i}: unknown kind {c.kind!r}")
            if c.channels_out < 1:
                out.append(f"cell {i}: channels_out must be >= 1")
            if c.kind == "classifier_head" and c.resizes:
                out.append(f"cell {i}: the classifier head cannot resize")
            if c.has_adaptor and c.resize_factor is not None:
                out.append(f"cell {i}: both an adaptor and a fixed resize factor")
            if c.resize_factor is not None and c.resize_factor <= 0:
                out.append(f"cell {i}: resize factor must be positive")
            if c.has_adaptor and self.mode in ("human_fixed", "random_fixed"):
                out.append(f"cell {i}: adaptors are not allowed in {self.mode} mode")
            if c.resize_factor is not None and self.mode == "shape_adaptor":
                out.append(f"cell {i}: fixed resizing is not allowed in shape_adaptor mode")
        if self.input_dim < 1 or self.input_channels < 1:
            out.append("input dims must be >= 1")
        if self.width_multiplier <= 0:
            out.append("width_multiplier must be positive")
        return out

    def validate(self):
        problems = self.violations()
        if problems:
            raise SpecError(problems)
        return self

    def cell_channels(self):
        """``(c_in, c_out)`` per cell, width multiplier applied to the body."""
        out, c_in = [], self.input_channels
        for c in self.cells:
            if c.kind == "classifier_head":
                c_out = c.channels_out
            else:
                c_out = max(1, int(round(c.channels_out * self.width_multiplier)))
            out.append((c_in, c_out))
            c_in = c_out
        return out

    @staticmethod
    def has_shortcut_conv(cell, c_in, c_out):
        return cell.kind == "residual_cell" and (c_in != c_out or cell.resizes)

    # -- serialisation ---------------------------------------------------
    def to_dict(self):
        return {
            "version": SPEC_VERSION,
            "cells": [asdict(c) for c in self.cells],
            "input_channels": self.input_channels,
            "input_dim": self.input_dim,
            "search_space": asdict(self.search_space),
            "mode": self.mode,
            "width_multiplier": self.width_multiplier,
        }

    @classmethod
    def from_dict(cls, d):
        version = d.get("version", SPEC_VERSION)
        if version != SPEC_VERSION:
            raise ValueError(f"unsupported spec version {version}")
        return cls(
            cells=[CellSpec(**c) for c in d["cells"]],
            input_channels=d.get("input_channels", 3),
            input_dim=d.get("input_dim", 32),
            search_space=SearchSpace(**d.get("search_space", {})),
            mode=d.get("mode", "shape_adaptor"),
            width_multiplier=d.get("width_multiplier", 1.0),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# spec presets

VGG16_CHANNELS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
VGG16_POOLS = (1, 3, 6, 9, 12)


def vgg16_spec(classes=10, input_dim=32, mode="shape_adaptor", n_pools=4, **kwargs):
    """VGG-16 layout. The human design pools after the first ``n_pools``
    of its five pooling points (four for 32x32 inputs)."""
    return conv_spec(VGG16_CHANNELS, classes, input_dim, mode,
                     pools=VGG16_POOLS[:n_pools], **kwargs)


def conv_spec(channels, classes, input_dim=32, mode="shape_adaptor", pools=(), factor=0.5, **kwargs):
    cells = []
    for i, c in enumerate(channels):
        fixed = factor if (mode != "shape_adaptor" and i in pools) else None
        cells.append(CellSpec("conv_cell", c, resize_factor=fixed))
    cells.append(CellSpec("classifier_head", classes))
    return NetworkSpec(cells, input_dim=input_dim, mode=mode, **kwargs)


def residual_spec(channels, classes, input_dim=32, mode="shape_adaptor", pools=(), **kwargs):
    cells = [CellSpec("residual_cell", c,
                      resize_factor=0.5 if (mode != "shape_adaptor" and i in pools) else None)
             for i, c in enumerate(channels)]
    cells.append(CellSpec("classifier_head", classes))
    return NetworkSpec(cells, input_dim=input_dim, mode=mode, **kwargs)


def uniform_positions(n_cells, n_adaptors):
    """Indices among ``n_cells`` body cells hosting ``n_adaptors`` evenly
    spread adaptors. Indices stay below ``n_cells``, so the classifier that
    follows the body never gets one."""
    positions = [((i + 1) * n_cells) // (n_adaptors + 1) for i in range(n_adaptors)]
    if len(set(positions)) != n_adaptors:
        raise SpecError([f"cannot place {n_adaptors} adaptors at distinct positions "
                         f"among {n_cells} cells"])
    return positions


def with_uniform_adaptors(spec, n_adaptors):
    spec = copy.deepcopy(spec)
    body = [i for i, c in enumerate(spec.cells) if c.kind != "classifier_head"]
    for c in spec.cells:
        c.has_adaptor = False
    for pos in uniform_positions(len(body), n_adaptors):
        spec.cells[body[pos]].has_adaptor = True
    return spec


def autosc_wrap(human_spec):
    """Attach shrink-only global-type adaptors to every non-resizing cell."""
    if human_spec.adaptor_count:
        raise SpecError(["spec already contains adaptors"])
    if human_spec.mode != "human_fixed":
        raise SpecError([f"autosc_wrap expects a human_fixed spec, got {human_spec.mode}"])
    spec = copy.deepcopy(human_spec)
    targets = [c for c in spec.cells if c.kind != "classifier_head" and not c.resizes]
    if not targets:
        warnings.warn("no non-resizing cells to wrap; spec returned unchanged", stacklevel=2)
        return spec
    for c in targets:
        c.has_adaptor = True
    spec.mode = "autosc"
    spec.search_space = SearchSpace(spec.search_space.r_min, spec.search_space.r_max, "global")
    return spec


# ---------------------------------------------------------------------------
# shape planning

def propagate(input_dim, stages, dim_rule):
    """Plan dims for a sequence of cells.

    ``stages`` has one entry per cell: ``None`` (no resizing), or a pair
    ``(kind, factor)`` with kind ``"adaptive"`` or ``"fixed"``. Under the
    global rule adaptive factors enter a running product applied to the
    reference dim, while fixed layers floor that reference dim as classical
    resizing layers do.
    """
    d = ref = int(input_dim)
    prod = 1.0
    dims, factors, cell_dims, clamped = [d], [], [], []
    for stage in stages:
        cell_dims.append(d)
        if stage is None:
            continue
        kind, f = stage
        if dim_rule == "local":
            raw = calculus.floor_dim(d * f)
        else:
            if kind == "fixed":
                ref = max(1, calculus.floor_dim(ref * f))
            else:
                prod *= f
            raw = calculus.round_half_away(ref * prod)
        d = raw if raw >= 1 else 1
        if raw < 1:
            clamped.append(len(dims))
        dims.append(d)
        factors.append(f)
    return ShapePlan(int(input_dim), factors, dims, cell_dims, clamped)


def static_plan(spec, adaptor_factor):
    """Plan a spec with every adaptor at ``adaptor_factor`` (a float or a
    list in cell order)."""
    n = spec.adaptor_count
    factors = list(adaptor_factor) if isinstance(adaptor_factor, (list, tuple)) else [adaptor_factor] * n
    it = iter(factors)
    stages = []
    for c in spec.cells:
        if c.has_adaptor:
            stages.append(("adaptive", next(it)))
        elif c.resize_factor is not None:
            stages.append(("fixed", c.resize_factor))
        else:
            stages.append(None)
    return propagate(spec.input_dim, stages, spec.dim_rule)


# ---------------------------------------------------------------------------
# layers

class Conv:
    def __init__(self, c_in, c_out, k, rng, dtype, padding=None, name="conv"):
        bound = math.sqrt(6.0 / (c_in * k * k))
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
        self.weight = Tensor(w.astype(dtype), requires_grad=True, name=f"{name}.weight")
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x):
        return conv2d(x, self.weight, stride=1, padding=self.padding)

    def parameters(self):
        return [self.weight]


class BatchNorm:
    def __init__(self, c, dtype, name="bn"):
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.training = True

    def __call__(self, x):
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           training=self.training)

    def parameters(self):
        return [self.gamma, self.beta]


class FixedResize:
    """A non-learnable resizing layer with factor ``factor``.

    Inside the search space it is a two-branch mixture with frozen weight
    ``(factor - r_min) / (r_max - r_min)``, so ``factor == r_min`` is plain
    2x2 max pooling; outside it is bilinear resizing.
    """

    def __init__(self, factor, space):
        self.factor = factor
        if space.r_min <= factor <= space.r_max:
            self.hi_weight = (factor - space.r_min) / (space.r_max - space.r_min)
        else:
            self.hi_weight = None

    def conv_stage(self, h, target):
        if self.hi_weight is None:
            return bilinear_resize(h, target, target)
        w_hi = self.hi_weight
        out = None
        if w_hi < 1:
            out = bilinear_resize(max_pool_2x2(h), target, target)
            if w_hi > 0:
                out = out * (1 - w_hi)
        if w_hi > 0:
            hi = bilinear_resize(h, target, target)
            hi = hi if w_hi == 1 else hi * w_hi
            out = hi if out is None else out + hi
        return out


class ConvCell:
    """conv3x3 -> batchnorm -> relu, then an optional resizing stage."""

    def __init__(self, c_in, c_out, rng, dtype, stage=None, name="cell"):
        self.conv = Conv(c_in, c_out, 3, rng, dtype, name=f"{name}.conv")
        self.bn = BatchNorm(c_out, dtype, name=f"{name}.bn")
        self.stage = stage

    def __call__(self, x, target):
        h = relu(self.bn(self.conv(x)))
        if self.stage is None:
            return h
        if isinstance(self.stage, ShapeAdaptor):
            return conv_cell_forward(self.stage, h, target)
        return self.stage.conv_stage(h, target)

    def modules(self):
        return {"conv": self.conv, "bn": self.bn}


class ResidualCell:
    """Two-conv residual block; a resizing stage mixes the shortcut and body
    branches at the target dim (doubled weights for adaptors)."""

    def __init__(self, c_in, c_out, rng, dtype, stage=None, name="cell"):
        self.conv1 = Conv(c_in, c_out, 3, rng, dtype, name=f"{name}.conv1")
        self.bn1 = BatchNorm(c_out, dtype, name=f"{name}.bn1")
        self.conv2 = Conv(c_out, c_out, 3, rng, dtype, name=f"{name}.conv2")
        self.bn2 = BatchNorm(c_out, dtype, name=f"{name}.bn2")
        self.stage = stage
        if c_in != c_out or stage is not None:
            self.short_conv = Conv(c_in, c_out, 1, rng, dtype, padding=0, name=f"{name}.short")
            self.short_bn = BatchNorm(c_out, dtype, name=f"{name}.short_bn")
        else:
            self.short_conv = self.short_bn = None

    def body(self, x):
        return self.bn2(self.conv2(relu(self.bn1(self.conv1(x)))))

    def shortcut(self, x):
        if self.short_conv is None:
            return x
        return self.short_bn(self.short_conv(x))

    def __call__(self, x, target):
        if self.stage is None:
            return relu(self.shortcut(x) + self.body(x))
        if isinstance(self.stage, ShapeAdaptor):
            return relu(residual_cell_forward(self.stage, x, self.shortcut, self.body, target))
        sc = bilinear_resize(self.shortcut(x), target, target)
        return relu(sc + bilinear_resize(self.body(x), target, target))

    def modules(self):
        mods = {"conv1": self.conv1, "bn1": self.bn1, "conv2": self.conv2, "bn2": self.bn2}
        if self.short_conv is not None:
            mods.update(short=self.short_conv, short_bn=self.short_bn)
        return mods


class Head:
    def __init__(self, features, classes, rng, dtype):
        bound = 1.0 / math.sqrt(features)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(classes, features)).astype(dtype),
                             requires_grad=True, name="head.weight")
        self.bias = Tensor(np.zeros(classes, dtype=dtype), requires_grad=True, name="head.bias")

    def __call__(self, x):
        return affine(global_avg_pool(x), self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


# ---------------------------------------------------------------------------
# model

class Model:
    def __init__(self, spec, cells, head, adaptors, dtype):
        self.spec = spec
        self.cells = cells
        self.head = head
        self.adaptors = adaptors
        self.dtype = np.dtype(dtype)
        self.optim_groups = ()

    @property
    def alpha_params(self):
        return [a.alpha for a in self.adaptors]

    def named_modules(self):
        for i, cell in enumerate(self.cells):
            for key, mod in cell.modules().items():
                yield f"cells.{i}.{key}", mod
        yield "head", self.head

    def weight_parameters(self):
        return [p for _, m in self.named_modules() for p in m.parameters()]

    def shape_parameters(self):
        return [a.alpha.raw for a in self.adaptors]

    def parameters(self):
        return self.weight_parameters() + self.shape_parameters()

    def batchnorms(self):
        return [m for _, m in self.named_modules() if isinstance(m, BatchNorm)]

    def train(self, mode=True):
        for bn in self.batchnorms():
            bn.training = mode
        return self

    def eval(self):
        return self.train(False)

    def install_penalty(self, rho):
        for a in self.alpha_params:
            a.rho = rho

    def plan(self, rho=None):
        """Current shape plan; ``rho`` overrides the installed penalty."""
        stages, it = [], iter(self.adaptors)
        for c in self.spec.cells:
            if c.has_adaptor:
                a = next(it).alpha
                factor = a.factor if rho is None else calculus.s_linear(
                    calculus.apply_penalty(a.alpha, rho, a.space, warn=False), a.space)
                stages.append(("adaptive", factor))
            elif c.resize_factor is not None:
                stages.append(("fixed", c.resize_factor))
            else:
                stages.append(None)
        return propagate(self.spec.input_dim, stages, self.spec.dim_rule)

    def forward(self, x, plan=None):
        """Logits for a batch. ``plan`` freezes the spatial dims (defaults
        to the current plan)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        plan = self.plan() if plan is None else plan
        out = x
        for i, cell in enumerate(self.cells):
            out = cell(out, plan.cell_dims[i + 1])
        return self.head(out)

    __call__ = forward

    # -- state -------------------------------------------------------------
    def state_dict(self):
        state = {}
        for name, mod in self.named_modules():
            for p in mod.parameters():
                state[p.name if p.name.startswith(name) else f"{name}.{p.name}"] = p.data.copy()
            if isinstance(mod, BatchNorm):
                state[f"{name}.running_mean"] = mod.running_mean.copy()
                state[f"{name}.running_var"] = mod.running_var.copy()
        for i, a in enumerate(self.adaptors):
            state[f"adaptors.{i}.raw"] = a.alpha.raw.data.copy()
            state[f"adaptors.{i}.rho"] = np.asarray(a.alpha.rho)
        return state

    def load_state_dict(self, state):
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"state is missing {missing[:5]}")
        for name, mod in self.named_modules():
            for p in mod.parameters():
                key = p.name if p.name.startswith(name) else f"{name}.{p.name}"
                p.data = np.asarray(state[key], dtype=self.dtype).copy()
            if isinstance(mod, BatchNorm):
                mod.running_mean[...] = state[f"{name}.running_mean"]
                mod.running_var[...] = state[f"{name}.running_var"]
        for i, a in enumerate(self.adaptors):
            a.alpha.raw.data = np.asarray(state[f"adaptors.{i}.raw"], dtype=self.dtype).copy()
            a.alpha.rho = float(state[f"adaptors.{i}.rho"])

    def astype(self, dtype):
        """Cast every parameter and buffer in place (e.g. float64 for checks)."""
        dtype = np.dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for bn in self.batchnorms():
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        self.dtype = dtype
        return self


def plan_shape(model):
    return model.plan()


def current_final_dim(model):
    return model.plan().final_dim


def solve_penalty(model, d_limit, max_rounds=64):
    """Penalty making the planned final dim at most ``d_limit``.

    Starts from the closed-form ``penalty_rho`` on the unpenalised plan.
    That value is exact for the global rule; under the local rule per-layer
    flooring can leave the final dim above the limit, so the same formula
    is reapplied to the penalised plan until it fits.
    """
    n = len(model.adaptors)
    d_cout = model.plan(rho=1.0).final_dim
    rho = calculus.penalty_rho(d_limit, d_cout, n) if n else 1.0
    for _ in range(max_rounds):
        if rho == 1.0:
            break
        d = model.plan(rho=rho).final_dim
        if d <= d_limit:
            break
        rho *= calculus.penalty_rho(d_limit, d, n)
    return rho


def build_network(spec, config=None, seed=0, dtype=None):
    """Instantiate ``spec``. In shape_adaptor mode without explicit
    placement, adaptors are spread uniformly (count from the module-count
    heuristic unless ``config.n_adaptors`` is set)."""
    from .trainer import TrainConfig

    config = config or TrainConfig()
    dtype = np.dtype(dtype or config.dtype)
    spec = copy.deepcopy(spec).validate()
    space = spec.search_space
    if spec.mode == "shape_adaptor" and spec.adaptor_count == 0:
        n = config.n_adaptors
        if n is None:
            n = calculus.module_count(spec.input_dim, config.d_last, space.r_min)
        spec = with_uniform_adaptors(spec, n)
    n_adaptors = spec.adaptor_count
    if spec.mode == "shape_adaptor" and n_adaptors:
        raw0 = calculus.init_alpha(spec.input_dim, config.d_out, config.d_last, n_adaptors, space)
    else:
        raw0 = -math.log(calculus.EPSILON)

    rng = np.random.default_rng(seed)
    cells, adaptors = [], []
    for i, ((c_in, c_out), c) in enumerate(zip(spec.cell_channels(), spec.cells)):
        if c.kind == "classifier_head":
            continue
        stage = None
        if c.has_adaptor:
            kind = "residual_cell" if c.kind == "residual_cell" else "conv_cell"
            stage = ShapeAdaptor(AlphaParam(raw0, space, dtype=dtype), cell_kind=kind)
            adaptors.append(stage)
        elif c.resize_factor is not None:
            stage = FixedResize(c.resize_factor, space)
        cls = ConvCell if c.kind == "conv_cell" else ResidualCell
        cells.append(cls(c_in, c_out, rng, dtype, stage, name=f"cells.{i}"))
    features, classes = spec.cell_channels()[-1]
    head = Head(features, classes, rng, dtype)
    return Model(spec, cells, head, adaptors, dtype)
