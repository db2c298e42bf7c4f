"""SGD with momentum and cosine annealing."""
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ParamGroup:
    """A set of parameters sharing one optimiser setting.

    ``kind`` is ``"weights"`` or ``"shape"``; the two groups are stepped on
    different schedules by the trainer.
    """

    kind: str
    params: list
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state(self):
        return [self.velocity.get(id(p)) for p in self.params]

    def load_state(self, buffers):
        self.velocity = {id(p): np.array(b, dtype=p.dtype) for p, b in zip(self.params, buffers)
                         if b is not None}


def sgd_momentum_step(group, lr=None):
    """One step of ``v <- m*v + (g + wd*p); p <- p - lr*v``, then clear grads.

    Parameters without a gradient are left untouched.
    """
    lr = group.learning_rate if lr is None else lr
    for p in group.params:
        if p.grad is None:
            continue
        d = p.grad
        if group.weight_decay:
            d = d + group.weight_decay * p.data
        v = group.velocity.get(id(p))
        if v is None or group.momentum == 0:
            v = np.array(d, dtype=p.dtype)
        else:
            v = (group.momentum * v + d).astype(p.dtype)
        group.velocity[id(p)] = v
        p.data = (p.data - lr * v).astype(p.dtype)
        p.grad = None


def cosine_annealing_lr(base_lr, step, total_steps):
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * base_lr * (1 + math.cos(math.pi * step / total_steps))
