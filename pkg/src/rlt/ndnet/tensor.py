"""Reverse-mode autodiff over float32 numpy arrays.

Small tape-based engine: each op records its parents and a backward
closure; Tensor.backward() walks the graph in reverse topological order.
Everything is float32; NaN/Inf surfacing anywhere is a NumericError.
"""
from __future__ import annotations

import os

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(RuntimeError):
    """A forward or backward pass produced NaN or Inf."""


class ContractError(RuntimeError):
    """A caller violated an API precondition (missing grads, bad state)."""


# Per-op finiteness checks cost a full pass over every result; they are
# opt-in via RLT_CHECK_FINITE=1. Loss scalars are always checked by callers.
_CHECK_FINITE = os.environ.get("RLT_CHECK_FINITE", "0") == "1"

import threading as _threading

_tls = _threading.local()  # collector and learner threads toggle independently


def _grad_on() -> bool:
    return getattr(_tls, "grad_enabled", True)


def _dtype():
    return getattr(_tls, "default_dtype", np.float32)


class no_grad:
    """Context manager suppressing tape construction (inference paths)."""

    def __enter__(self):
        self._prev = _grad_on()
        _tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


class precise:
    """Construct tensors in float64 inside the context.

    Used by verification harnesses (finite differences) where float32 loss
    quantization would swamp the quantity being measured. float32 parameters
    entering an op promote naturally.
    """

    def __enter__(self):
        self._prev = _dtype()
        _tls.default_dtype = np.float64
        return self

    def __exit__(self, *exc):
        _tls.default_dtype = self._prev
        return False


def _as_f32(data) -> np.ndarray:
    return np.asarray(data, dtype=_dtype())


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {what}")
        return self

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar tensor")
        # Iterative topological sort; graphs can be long-chained.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is None or node.grad is None:
                continue
            node._backward_fn(node.grad)
            if _CHECK_FINITE:
                for p in node._parents:
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise NumericError("non-finite gradient in backward pass")

    # Operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(parent: Tensor, g: np.ndarray):
    if not parent.requires_grad:
        return
    if parent.grad is None:
        parent.grad = g.astype(parent.data.dtype, copy=True)
    else:
        parent.grad += g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError("non-finite values in forward pass")
    out = Tensor(data)
    if _grad_on() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# Primitive ops ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dims mismatch: {a.data.shape} @ {b.data.shape}"
        )
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, np.float32(0.0))

    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _make(data, (a,), backward)


_GELU_C = np.float32(np.sqrt(2.0 / np.pi))
_GELU_K = np.float32(0.044715)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + _GELU_K * x * x * x)
    t = np.tanh(inner)
    data = np.float32(0.5) * x * (np.float32(1.0) + t)

    def backward(g):
        dinner = _GELU_C * (np.float32(1.0) + np.float32(3.0) * _GELU_K * x * x)
        dt = (np.float32(1.0) - t * t) * dinner
        local = np.float32(0.5) * (np.float32(1.0) + t) + np.float32(0.5) * x * dt
        _accumulate(a, g * local)

    return _make(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (np.float32(1.0) - t * t))

    return _make(t, (a,), backward)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def backward(g):
        _accumulate(a, g * np.float32(2.0) * a.data)

    return _make(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    s = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g / (np.float32(2.0) * s))

    return _make(s, (a,), backward)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * e)

    return _make(e, (a,), backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; subgradient routes to the smaller operand (ties: a)."""
    data = np.minimum(a.data, b.data)

    def backward(g):
        take_a = a.data <= b.data
        _accumulate(a, _unbroadcast(g * take_a, a.data.shape))
        _accumulate(b, _unbroadcast(g * (~take_a), b.data.shape))

    return _make(data, (a, b), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=a.data.dtype)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).astype(np.float32))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).astype(np.float32))

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * Tensor(np.float32(1.0 / n))


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        _accumulate(a, np.transpose(g, inv))

    return _make(data, (a,), backward)


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accumulate(a, full)

    return _make(data, (a,), backward)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        start = 0
        for t, s in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + s)
            _accumulate(t, g[tuple(idx)])
            start += s

    return _make(data, tuple(tensors), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accumulate(a, s * (g - dot))

    return _make(s, (a,), backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b (bias broadcast over leading axes)."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(f"affine dims mismatch: {x.data.shape} @ {w.data.shape}")
    data = np.matmul(x.data, w.data)
    data += b.data

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.matmul(g, w.data.T))
        if w.requires_grad:
            xd = x.data.reshape(-1, x.data.shape[-1])
            gd = g.reshape(-1, g.shape[-1])
            _accumulate(w, np.matmul(xd.T, gd))
        if b.requires_grad:
            _accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(data, (x, w, b), backward)


def layernorm_op(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Fused layer normalization over the last axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    y = centered * inv
    data = y * gamma.data + beta.data

    def backward(g):
        n_axes = tuple(range(g.ndim - 1))
        _accumulate(gamma, (g * y).sum(axis=n_axes))
        _accumulate(beta, g.sum(axis=n_axes))
        if x.requires_grad:
            gy = g * gamma.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * y).mean(axis=-1, keepdims=True)
            _accumulate(x, (gy - m1 - y * m2) * inv)

    return _make(data, (x, gamma, beta), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clip; zero gradient outside [lo, hi]."""
    data = np.clip(a.data, np.float32(lo), np.float32(hi))

    def backward(g):
        inside = (a.data >= lo) & (a.data <= hi)
        _accumulate(a, g * inside)

    return _make(data, (a,), backward)
