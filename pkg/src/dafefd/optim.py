"""SGD with momentum, coupled weight decay and a step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor


@dataclass
class Schedule:
    base_lr: float = 0.001
    milestones: tuple[int, ...] = (1600, 1900)
    gamma: float = 0.1

    def lr_at(self, iteration: int) -> float:
        drops = sum(1 for m in self.milestones if iteration >= m)
        return self.base_lr * self.gamma**drops


@dataclass
class SGD:
    """``v <- momentum*v + g + weight_decay*w``; ``w <- w - lr*v``."""

    params: list[Tensor]
    schedule: Schedule = field(default_factory=Schedule)
    momentum: float = 0.9
    weight_decay: float = 0.0005
    iteration: int = 0
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.velocity:
            self.velocity = [np.zeros_like(p.data) for p in self.params]
        for v, p in zip(self.velocity, self.params):
            if v.shape != p.shape:
                raise ValueError(f"velocity shape {v.shape} != parameter shape {p.shape}")

    @property
    def lr(self) -> float:
        return self.schedule.lr_at(self.iteration)

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            if p.grad.shape != p.shape:
                raise ValueError(f"gradient shape {p.grad.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError("non-finite gradient; aborting step")
        lr = self.lr
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else 0.0
            v *= self.momentum
            v += g + self.weight_decay * p.data
            p.data -= lr * v
        self.iteration += 1


def sgd_step(params, grads, state: SGD) -> None:
    """Functional wrapper: load ``grads`` into ``params`` and take one step."""
    for p, g in zip(params, grads):
        p.grad = np.asarray(g, dtype=np.float64).reshape(p.shape).copy()
    state.step()
