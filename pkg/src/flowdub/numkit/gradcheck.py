"""Central finite-difference oracle for checking reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, float64_mode, no_grad


def numerical_grads(
    loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-3
) -> dict[str, np.ndarray]:
    """Perturb each parameter element by +-h and difference the scalar loss."""
    out = {}
    with float64_mode(), no_grad():
        for name, p in params.items():
            g = np.zeros(p.shape, dtype=np.float64)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float(loss_fn().data)
                flat[i] = orig - h
                down = float(loss_fn().data)
                flat[i] = orig
                g.reshape(-1)[i] = (up - down) / (2.0 * h)
            out[name] = g
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), with 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom < 1e-12:
        return float(np.linalg.norm(a - n))
    return float(np.linalg.norm(a - n) / denom)
