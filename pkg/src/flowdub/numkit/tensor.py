"""Reverse-mode automatic differentiation over a closed set of dense ops.

Supported ops: matmul, add, mul, affine, nonlinearity (tanh, sigmoid, relu,
silu, log), softmax, reduce_mean and squared_error. Storage is float32 unless
``float64_mode`` is active; matmuls and reductions accumulate in float64.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Mapping

import numpy as np



class _State(threading.local):
    # per-thread so inference in worker threads cannot flip another thread's mode
    dtype = np.float32
    grad_enabled = True


_state = _State()

LOG_CLAMP = 1e-12


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def float64_mode():
    """Store every new array as float64 (used by finite-difference checks)."""
    prev = _state.dtype
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def current_dtype():
    return _state.dtype


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_state.dtype, order="C")
        self.data = _finite(arr, "constructor")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, name={self.name})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    with np.errstate(over="ignore"):
        # an overflowing cast becomes inf and is reported by _finite
        arr = np.asarray(data, dtype=_state.dtype, order="C")
    out.data = _finite(arr, op)
    out.grad = None
    out.name = None
    out._op = op
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.reshape(shape)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)

    def backward(g):
        return g @ b64.T, a64.T @ g

    return _make(a64 @ b64, "matmul", (a, b), backward)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data.astype(np.float64) + b.data, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data.astype(np.float64), b.data.astype(np.float64)

    def backward(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _make(ad * bd, "mul", (a, b), backward)


def affine(x, weight, bias=None) -> Tensor:
    """x @ weight + bias, with bias broadcast over rows."""
    x, weight = _lift(x), _lift(weight)
    x64, w64 = x.data.astype(np.float64), weight.data.astype(np.float64)
    out = x64 @ w64
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = _lift(bias)
        out = out + bias.data
        parents = (x, weight, bias)
        bshape = bias.shape

    def backward(g):
        grads = (g @ w64.T, x64.T @ g)
        if bias is not None:
            grads = grads + (_unbroadcast(g, bshape),)
        return grads

    return _make(out, "affine", parents, backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def nonlinearity(x, kind: str) -> Tensor:
    x = _lift(x)
    z = x.data.astype(np.float64)
    if kind == "tanh":
        y = np.tanh(z)
        local = 1.0 - y * y
    elif kind == "sigmoid":
        y = _sigmoid(z)
        local = y * (1.0 - y)
    elif kind == "relu":
        y = np.maximum(z, 0.0)
        local = (z > 0).astype(np.float64)
    elif kind == "silu":
        s = _sigmoid(z)
        y = z * s
        local = s * (1.0 + z * (1.0 - s))
    elif kind == "log":
        clamped = z < LOG_CLAMP
        y = np.log(np.maximum(z, LOG_CLAMP))
        local = np.where(clamped, 0.0, 1.0 / np.maximum(z, LOG_CLAMP))
    else:
        raise ValueError(f"unsupported nonlinearity {kind!r}")

    def backward(g):
        return (g * local,)

    return _make(y, kind, (x,), backward)


def tanh(x) -> Tensor:
    return nonlinearity(x, "tanh")


def sigmoid(x) -> Tensor:
    return nonlinearity(x, "sigmoid")


def relu(x) -> Tensor:
    return nonlinearity(x, "relu")


def silu(x) -> Tensor:
    return nonlinearity(x, "silu")


def log(x) -> Tensor:
    return nonlinearity(x, "log")


def softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    z = x.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, "softmax", (x,), backward)


def reduce_mean(x, axis: int | None = None) -> Tensor:
    x = _lift(x)
    shape = x.shape
    out = x.data.mean(axis=axis, dtype=np.float64, keepdims=axis is not None)
    count = x.data.size if axis is None else shape[axis]

    def backward(g):
        return (np.broadcast_to(np.asarray(g, dtype=np.float64) / count, shape),)

    return _make(np.asarray(out), "reduce_mean", (x,), backward)


def squared_error(pred, target) -> Tensor:
    """Mean over all elements of (pred - target)^2."""
    pred, target = _lift(pred), _lift(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data.astype(np.float64) - target.data
    n = diff.size

    def backward(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _make(np.asarray(np.mean(diff * diff)), "squared_error", (pred, target), backward)


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None):
    """Propagate d(output)/d(leaf) through the recorded graph.

    Returns a dict of gradients keyed like ``params`` (a mapping or a list);
    parameters the output does not depend on get zeros.
    """
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    if not np.all(np.isfinite(output.data)):
        raise NonFiniteError("non-finite graph output")
    grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape, dtype=np.float64)}
    for node in reversed(_topo(output)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    if params is None:
        return None
    items = params.items() if isinstance(params, Mapping) else enumerate(params)
    result = {}
    for key, p in items:
        g = grads.get(id(p))
        g = np.zeros(p.shape) if g is None else np.asarray(g)
        g = _finite(g.astype(_state.dtype), "backward")
        p.grad = g
        result[key] = g
    return result
