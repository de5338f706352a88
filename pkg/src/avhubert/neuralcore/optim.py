"""Adam and the warmup / linear-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class LRSchedule:
    peak_lr: float = 0.002
    total_steps: int = 1000
    warmup_fraction: float = 0.08

    def __post_init__(self):
        if not 0 < self.warmup_fraction < 1:
            raise ValueError(f"warmup_fraction must be in (0, 1), got {self.warmup_fraction}")
        if self.peak_lr <= 0:
            raise ValueError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")


def lr_at(schedule: LRSchedule, step: int) -> float:
    """Learning rate at ``step``: linear ramp to the peak, then linear decay to 0."""
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = schedule.warmup_fraction * total
    if step < warm:
        return schedule.peak_lr * step / warm
    if total == warm:
        return schedule.peak_lr
    return schedule.peak_lr * (total - step) / (total - warm)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, names=None) -> None:
    """One bias-corrected Adam update, in place, from each parameter's ``.grad``.

    Parameters without a gradient (or not listed in ``names``) are left alone
    but the step counter is shared.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in names if names is not None else params:
        p = params[name]
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype)
