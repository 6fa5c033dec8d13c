from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Parameter


@dataclass(frozen=True)
class LrSchedule:
    """Linear warm-up to ``peak`` then inverse-square-root decay."""

    peak: float
    warmup: int

    def __post_init__(self):
        if self.peak <= 0 or self.warmup < 1:
            raise ValueError("LrSchedule needs peak > 0 and warmup >= 1")

    def __call__(self, step: int) -> float:
        if step < 1:
            raise ValueError("steps are counted from 1")
        return self.peak * min(step / self.warmup, math.sqrt(self.warmup / step))


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_by_global_norm(params: dict[str, Parameter], max_norm: float | None) -> float:
    """Scale grads in place so their joint L2 norm is at most ``max_norm``. Returns the pre-clip norm."""
    norm = global_norm(p.grad for p in params.values() if p.grad is not None)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


class Adam:
    def __init__(self, params: dict[str, Parameter], schedule: LrSchedule,
                 betas=(0.9, 0.98), eps: float = 1e-9):
        self.params = params
        self.schedule = schedule
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def step(self) -> float:
        """Apply one update. Raises ``FloatingPointError`` naming the first non-finite grad."""
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        lr = self.schedule(t)
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for name, p in self.params.items():
            if not p.trainable or p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
        return lr

    def state_dict(self):
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state_dict(self, state):
        self.step_count = state["step"]
        self.m = {k: v.copy() for k, v in state["m"].items()}
        self.v = {k: v.copy() for k, v in state["v"].items()}
