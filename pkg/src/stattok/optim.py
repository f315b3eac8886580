"""Decoupled-weight-decay adaptive-moment optimizer with a warmup+cosine
learning-rate schedule and global-norm gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(RuntimeError):
    def __init__(self, name: str):
        self.param_name = name
        super().__init__(f"non-finite gradient for parameter {name}")


@dataclass
class Schedule:
    base_lr: float = 1e-3
    warmup_steps: int = 200
    total_steps: int = 3000
    end_lr: float = 1e-4

    def __post_init__(self):
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ValueError(f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")
        if self.end_lr > self.base_lr:
            raise ValueError(f"end_lr {self.end_lr} exceeds base_lr {self.base_lr}")


def lr_at(step: int, schedule: Schedule, group_scale: float = 1.0) -> float:
    """Linear warmup from 0 to base, cosine decay to end_lr; a parameter
    group scales the whole curve (e.g. the probability head)."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step < schedule.warmup_steps:
        lr = schedule.base_lr * step / schedule.warmup_steps
    elif step >= schedule.total_steps:
        lr = schedule.end_lr
    else:
        t = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
        lr = schedule.end_lr + 0.5 * (schedule.base_lr - schedule.end_lr) * (1.0 + math.cos(math.pi * t))
    return lr * group_scale


class AdamW:
    """Bias-corrected moments; decoupled decay is applied multiplicatively
    to the parameter before the moment update."""

    def __init__(self, params: list[tuple[str, Tensor]], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 1e-4,
                 group_scales: dict[str, float] | None = None):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.group_scales = group_scales or {}
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def _scale(self, name: str) -> float:
        return self.group_scales.get(name, 1.0)

    def step(self, lr: float):
        """One update using each parameter's accumulated .grad (missing grads
        count as zero).  Raises NonFiniteGradient before touching any state."""
        for name, p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteGradient(name)
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            eff_lr = lr * self._scale(name)
            if self.weight_decay:
                p.data *= np.asarray(1.0 - eff_lr * self.weight_decay, dtype=p.data.dtype)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - np.asarray(eff_lr, dtype=p.data.dtype) * update.astype(p.data.dtype)

    def state_records(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{name}": self.m[name] for name, _ in self.params}
        out.update({f"opt.v.{name}": self.v[name] for name, _ in self.params})
        out["opt.step"] = np.asarray([self.step_count], dtype=np.float32)
        return out

    def load_state_records(self, records: dict[str, np.ndarray]):
        for name, _ in self.params:
            self.m[name] = records[f"opt.m.{name}"].astype(np.float32).copy()
            self.v[name] = records[f"opt.v.{name}"].astype(np.float32).copy()
        self.step_count = int(records["opt.step"][0])


def clip_global_norm(params: list[tuple[str, Tensor]], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        for _, p in params:
            if p.grad is not None:
                # grad arrays can be shared with graph nodes; never mutate
                p.grad = p.grad * np.asarray(max_norm / norm, dtype=p.grad.dtype)
    return norm
