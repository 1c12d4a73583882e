"""Adam with bias correction and a cosine-annealing learning-rate schedule."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators plus the step count."""

    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            beta1=beta1, beta2=beta2, epsilon=epsilon,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
              state: AdamState, lr: float) -> None:
    """One in-place Adam update; `t` increments by exactly 1."""
    if lr < 0:
        raise ValueError(f"adam_step: negative lr {lr}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} vs param {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        if lr != 0.0:
            mhat = state.m[i] / c1
            vhat = state.v[i] / c2
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + state.epsilon)


class Adam:
    """Convenience wrapper tying an AdamState to a parameter list."""

    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, beta1, beta2, epsilon)

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class CosineSchedule:
    """lr(step) = min_lr + 0.5*(base_lr - min_lr)*(1 + cos(pi*step/total))."""

    base_lr: float
    total_steps: int
    min_lr: float = 0.0

    def lr(self, step: int) -> float:
        if step < 0 or step > self.total_steps:
            warnings.warn(f"cosine_lr: step {step} outside [0, {self.total_steps}], clamping")
            step = min(max(step, 0), self.total_steps)
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (
            1.0 + math.cos(math.pi * step / self.total_steps)
        )


def cosine_lr(schedule: CosineSchedule, step: int) -> float:
    return schedule.lr(step)
