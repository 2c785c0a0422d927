"""Parameter storage, Adam/AdamW, global-norm clipping and warmup/decay schedules."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import NonFiniteError, Tensor, current_dtype


class ParamStore:
    """Named trainable arrays plus Adam moments and a step counter."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        if name.startswith("_") or name.endswith(("/m", "/v")):
            raise ValueError(f"reserved parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros(t.shape, dtype=t.data.dtype)
        self.v[name] = np.zeros(t.shape, dtype=t.data.dtype)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for k, t in self.params.items():
            new.params[k] = Tensor(t.data.copy(), requires_grad=True, name=k)
            new.m[k] = self.m[k].copy()
            new.v[k] = self.v[k].copy()
        new.step = self.step
        return new


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        g64 = np.asarray(g, dtype=np.float64)
        total += float(np.dot(g64.ravel(), g64.ravel()))
    return float(np.sqrt(total))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients by max_norm / norm when their joint L2 norm exceeds max_norm.

    Norms within float32 rounding of max_norm count as already clipped, which
    keeps clip(clip(g)) bitwise equal to clip(g).
    """
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k!r}")
    norm = global_norm(grads)
    if norm <= max_norm * (1.0 + 1e-6):
        return dict(grads)
    scale = max_norm / norm
    return {k: (np.asarray(g, dtype=np.float64) * scale).astype(g.dtype) for k, g in grads.items()}


def adam_step(
    params: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> ParamStore:
    """One Adam update in place; weight_decay > 0 gives decoupled AdamW decay.

    Parameters absent from ``grads`` are left untouched (frozen).
    """
    for k, g in grads.items():
        if k not in params.params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if np.shape(g) != params[k].shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {params[k].shape} for {k!r}")
    b1, b2 = betas
    params.step += 1
    t = params.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, g in grads.items():
        p = params[k]
        dtype = p.data.dtype
        g64 = np.asarray(g, dtype=np.float64)
        m = b1 * params.m[k].astype(np.float64) + (1.0 - b1) * g64
        v = b2 * params.v[k].astype(np.float64) + (1.0 - b2) * g64 * g64
        w = p.data.astype(np.float64)
        w = w - lr * weight_decay * w - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        params.m[k] = m.astype(dtype)
        params.v[k] = v.astype(dtype)
        p.data = w.astype(dtype)
    return params


@dataclass(frozen=True)
class Schedule:
    """Linear warmup from 0 to peak_lr, then linear decay to final_lr at total_steps."""

    peak_lr: float
    final_lr: float
    warmup_steps: int
    total_steps: int
    clip_norm: float | None = None

    def __post_init__(self):
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be > 0")
        if self.final_lr < 0:
            raise ValueError("final_lr must be >= 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.total_steps <= self.warmup_steps:
            raise ValueError("total_steps must exceed warmup_steps")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0 (or None for no clipping)")


def lr_at_step(sched: Schedule, step: int) -> float:
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    if step == sched.warmup_steps:
        return sched.peak_lr
    if step < sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    if step == sched.total_steps:
        return sched.final_lr
    frac = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.peak_lr + (sched.final_lr - sched.peak_lr) * frac


def init_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(current_dtype())
