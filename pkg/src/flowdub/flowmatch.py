"""Conditional flow matching on the straight optimal-transport path.

x_t = (1 - t) x0 + t x1 with target velocity u_t = x1 - x0 (zero minimum
noise, so t = 1 lands exactly on data). Sampling integrates dx/dt = v(x, t)
from t = 0 to t = 1 on a uniform grid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from . import numkit as nk


@dataclass
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: float | np.ndarray
    x_t: np.ndarray
    u_t: np.ndarray


@dataclass(frozen=True)
class GuidanceSpec:
    scale: float = 2.0
    drop_probability: float = 0.0

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must lie in [0, 1]")


def sample_ot_path(x0: np.ndarray, x1: np.ndarray, t) -> FlowSample:
    """Point on the straight path; ``t`` may be a scalar or broadcast against rows."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs x1 {x1.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    if t_arr.ndim == 1 and x0.ndim > 1:
        t_arr = t_arr.reshape((-1,) + (1,) * (x0.ndim - 1))
    x_t = (1.0 - t_arr) * x0 + t_arr * x1
    return FlowSample(x0=x0, x1=x1, t=t, x_t=x_t, u_t=x1 - x0)


FieldFn = Callable[[np.ndarray, np.ndarray, Any], nk.Tensor]


def cfm_loss(
    field: FieldFn,
    x1: np.ndarray,
    condition: Any,
    rng: np.random.Generator,
    sample_index: np.ndarray | None = None,
    x0: np.ndarray | None = None,
    t: np.ndarray | None = None,
) -> tuple[nk.Tensor, FlowSample]:
    """Mean squared error between the predicted field and u_t over a batch.

    ``x1`` is rows x features; ``sample_index`` maps each row to its sample so
    every sample gets one t ~ U(0, 1) (default: each row is a sample).
    ``field(x_t, t_rows, condition)`` must return a Tensor shaped like x1.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    rows = x1.shape[0]
    if sample_index is None:
        sample_index = np.arange(rows)
    n_samples = int(sample_index.max()) + 1 if rows else 0
    if x0 is None:
        x0 = rng.standard_normal(x1.shape)
    if t is None:
        t = rng.uniform(0.0, 1.0, size=n_samples)
    t_rows = np.asarray(t, dtype=np.float64)[sample_index]
    fs = sample_ot_path(x0, x1, t_rows)
    pred = field(fs.x_t, t_rows, condition)
    if pred.shape != x1.shape:
        raise ValueError(f"field returned {pred.shape}, expected {x1.shape}")
    return nk.squared_error(pred, nk.Tensor(fs.u_t)), fs


def cfg_combine(v_cond: np.ndarray, v_uncond: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free guidance: v_uncond + w (v_cond - v_uncond)."""
    v_cond = np.asarray(v_cond)
    v_uncond = np.asarray(v_uncond)
    if v_cond.shape != v_uncond.shape:
        raise ValueError(f"shape mismatch: {v_cond.shape} vs {v_uncond.shape}")
    if w == 1.0:
        return v_cond.copy()
    if w == 0.0:
        return v_uncond.copy()
    return v_uncond + w * (v_cond - v_uncond)


def ode_sample(
    field: Callable[[np.ndarray, float, Any], np.ndarray],
    x0: np.ndarray,
    steps: int = 32,
    method: str = "euler",
    guidance: GuidanceSpec | None = None,
    condition: Any = None,
    uncond_condition: Any = None,
) -> np.ndarray:
    """Integrate the learned field from t=0 to t=1 and return x(1).

    With a guidance scale other than 1 the velocity is the guided mix of
    ``field(x, t, condition)`` and ``field(x, t, uncond_condition)``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if method not in ("euler", "midpoint"):
        raise ValueError(f"unknown method {method!r}")
    guided = guidance is not None and guidance.scale != 1.0
    if guided and uncond_condition is None:
        raise ValueError("guidance needs an unconditional condition")

    def velocity(x, t):
        v = np.asarray(field(x, t, condition), dtype=np.float64)
        if guided:
            v = cfg_combine(v, np.asarray(field(x, t, uncond_condition), dtype=np.float64), guidance.scale)
        return v

    x = np.array(x0, dtype=np.float64)
    h = 1.0 / steps
    for k in range(steps):
        t = k * h
        if method == "euler":
            x = x + h * velocity(x, t)
        else:
            mid = x + 0.5 * h * velocity(x, t)
            x = x + h * velocity(mid, t + 0.5 * h)
        if not np.all(np.isfinite(x)):
            raise nk.NonFiniteError(f"non-finite ODE state at step {k}")
    return x
