"""AdamW with decoupled weight decay and a cosine schedule with linear warm-up."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .tensor import Tensor


@dataclass
class LrSchedule:
    base_lr: float = 2e-4
    total_epochs: int = 100
    warmup_epochs: int = 10

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValueError(f"base_lr must be non-negative, got {self.base_lr}")
        if not 0 <= self.warmup_epochs < max(self.total_epochs, 1):
            raise ValueError(
                f"need 0 <= warmup_epochs < total_epochs, got {self.warmup_epochs}, "
                f"{self.total_epochs}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate for ``epoch`` (0-based); reaches 0 at ``total_epochs``."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if epoch < schedule.warmup_epochs:
        return schedule.base_lr * (epoch + 1) / schedule.warmup_epochs
    span = schedule.total_epochs - schedule.warmup_epochs
    progress = (epoch - schedule.warmup_epochs) / span
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    lr: float = 2e-4
    weight_decay: float = 0.05
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: Dict[int, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[int, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
               state: OptimizerState) -> List[np.ndarray]:
    """One AdamW update; returns new parameter arrays and advances ``state``.

    Moment buffers are keyed by position in ``params``, so callers must pass
    parameters in a stable order.
    """
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"parameter {i} has shape {p.shape} but gradient {g.shape}")
        m = state.exp_avg.get(i)
        v = state.exp_avg_sq.get(i)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.exp_avg[i] = m.astype(p.dtype, copy=False)
        state.exp_avg_sq[i] = v.astype(p.dtype, copy=False)
        decayed = p * (1.0 - state.lr * state.weight_decay)
        step = state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        out.append((decayed - step).astype(p.dtype, copy=False))
    return out


class AdamW:
    """Stateful wrapper applying :func:`adamw_step` to tensors in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 2e-4, weight_decay: float = 0.05,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, betas=betas, eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new = adamw_step([p.data for p in self.params], grads, self.state)
        for p, value in zip(self.params, new):
            p.data = value
