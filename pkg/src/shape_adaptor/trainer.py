"""Interleaved optimisation of shape and weight parameters.

Each iteration draws one batch, installs the memory penalty (when a limit
is set), and runs a single forward/backward pass. Weights are stepped every
iteration; shape parameters every ``alpha_update_interval`` iterations
(1-based, ``i % interval == 0``), from the gradients of that same pass.
"""
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import batch_iterator
from .network import NetworkSpec, build_network, solve_penalty
from .optim import ParamGroup, cosine_annealing_lr, sgd_momentum_step
from .tensor import no_grad, softmax_cross_entropy

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "shape-adaptor-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    alpha_lr: float = 0.1
    weight_lr: float = 0.1
    alpha_update_interval: int = 20  # None disables shape updates
    d_last: int = 2
    d_out: int = 8
    d_limit: int = None
    epochs: int = 200
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    alpha_weight_decay: float = 0.0
    seed: int = 0
    max_iterations: int = None
    n_adaptors: int = None
    dtype: str = "float32"
    augment: bool = False

    def __post_init__(self):
        if self.alpha_update_interval is not None and self.alpha_update_interval < 1:
            raise ValueError("alpha_update_interval must be >= 1 (or None to disable)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {unknown}")
        return cls(**d)


@dataclass
class TraceRecord:
    iteration: int
    epoch: int
    event: str  # "alpha_update" | "epoch_end"
    factors: list
    raw_alphas: list
    rho: float
    dims: list
    loss: float
    alpha_lr: float
    weight_lr: float
    cell_dims: list = None  # dim entering each cell, head included


@dataclass
class ShapeTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def append(self, record):
        self.records.append(record)

    def factor_series(self):
        """(iterations, factors) arrays over alpha-update records."""
        rows = [r for r in self.records if r.event == "alpha_update"]
        return (np.array([r.iteration for r in rows]),
                np.array([r.factors for r in rows], dtype=float))


def record_shape_trace(trace, sink):
    """Append ``trace`` as JSON lines to a writable text stream."""
    for rec in trace:
        sink.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
    sink.flush()


def parse_shape_trace(lines):
    trace = ShapeTrace()
    for line in lines:
        line = line.strip()
        if line:
            trace.append(TraceRecord(**json.loads(line)))
    return trace


def _snapshot(model, iteration, loss):
    return {"iteration": iteration, "loss": loss,
            "factors": [a.factor for a in model.alpha_params],
            "raw_alphas": [float(a.raw.data) for a in model.alpha_params],
            "dims": model.plan().dims}


def _record(model, iteration, epoch, event, loss, lr_a, lr_w):
    alphas = model.alpha_params
    plan = model.plan()
    return TraceRecord(
        iteration=iteration, epoch=epoch, event=event,
        factors=[float(a.factor) for a in alphas],
        raw_alphas=[float(a.raw.data) for a in alphas],
        rho=float(alphas[0].rho) if alphas else 1.0,
        dims=[int(d) for d in plan.dims],
        loss=float(loss), alpha_lr=float(lr_a), weight_lr=float(lr_w),
        cell_dims=[int(d) for d in plan.cell_dims],
    )


def total_iterations(dataset_size, config):
    per_epoch = math.ceil(dataset_size / config.batch_size)
    total = per_epoch * config.epochs
    if config.max_iterations is not None:
        total = min(total, config.max_iterations)
    return total


def _install_penalty(model, config):
    rho = 1.0
    if config.d_limit is not None and model.adaptors:
        rho = solve_penalty(model, config.d_limit)
    model.install_penalty(rho)
    return rho


def train(model, dataset, config, sink=None):
    """Run the interleaved optimisation; returns ``(model, trace)``.

    ``sink``, if given, receives each trace record as a JSON line as soon as
    it is produced. The optimiser groups are left on ``model.optim_groups``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    trace = ShapeTrace()
    total = total_iterations(len(dataset), config)
    if total == 0:
        return model, trace

    weights = ParamGroup("weights", model.weight_parameters(), config.weight_lr,
                         config.momentum, config.weight_decay)
    shapes = ParamGroup("shape", model.shape_parameters(), config.alpha_lr,
                        config.momentum, config.alpha_weight_decay)
    model.optim_groups = (weights, shapes)  # for checkpointing
    interval = config.alpha_update_interval
    model.train()

    def emit(rec):
        trace.append(rec)
        if sink is not None:
            record_shape_trace([rec], sink)

    i, loss_value, lr_a, lr_w = 0, float("nan"), config.alpha_lr, config.weight_lr
    for epoch in range(config.epochs):
        batches = batch_iterator(dataset, config.batch_size, config.seed, epoch,
                                 flip=config.augment, crop=config.augment)
        for xb, yb in batches:
            i += 1
            _install_penalty(model, config)
            plan = model.plan()
            loss = softmax_cross_entropy(model.forward(xb, plan), yb)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise TrainingDiverged(f"non-finite loss at iteration {i}",
                                       _snapshot(model, i, loss_value))
            loss.backward()

            lr_a = cosine_annealing_lr(config.alpha_lr, i - 1, total)
            lr_w = cosine_annealing_lr(config.weight_lr, i - 1, total)
            shape_step = bool(model.adaptors) and interval is not None and i % interval == 0
            if shape_step:
                sgd_momentum_step(shapes, lr_a)
            else:
                shapes.zero_grad()
            sgd_momentum_step(weights, lr_w)
            _install_penalty(model, config)

            if shape_step:
                emit(_record(model, i, epoch, "alpha_update", loss_value, lr_a, lr_w))
            if i >= total:
                break
        emit(_record(model, i, epoch, "epoch_end", loss_value, lr_a, lr_w))
        if i >= total:
            break
    logger.info("trained %d iterations, final loss %.4f", i, loss_value)
    return model, trace


def evaluate(model, dataset, batch_size=256):
    """Top-1 accuracy with batch norm in eval mode."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    model.eval()
    correct = 0
    try:
        with no_grad():
            plan = model.plan()
            for xb, yb in batch_iterator(dataset, batch_size, shuffle=False):
                logits = model.forward(xb, plan).data
                correct += int((logits.argmax(axis=1) == yb).sum())
    finally:
        model.train()
    return correct / len(dataset)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model, config, iteration=0, groups=()):
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "config": config.to_dict(),
        "iteration": iteration,
        "dtype": model.dtype.name,
        "saved_at": time.time(),
    }
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    for g in groups:
        for j, buf in enumerate(g.state()):
            if buf is not None:
                arrays[f"opt/{g.kind}/{j}"] = buf
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path):
    """Returns ``(model, config, iteration, optimizer_buffers)``."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a shape adaptor checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        spec = NetworkSpec.from_dict(meta["spec"])
        config = TrainConfig.from_dict(meta["config"])
        model = build_network(spec, config, seed=config.seed, dtype=meta["dtype"])
        model.load_state_dict({k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")})
        buffers = {k[len("opt/"):]: z[k] for k in z.files if k.startswith("opt/")}
    return model, config, meta["iteration"], buffers
