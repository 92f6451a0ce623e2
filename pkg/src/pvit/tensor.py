"""Reverse-mode autodiff on numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional gradient buffer. Operations on
tensors record a tape (parent links + a backward closure); ``backward()`` on a
scalar walks the tape in reverse topological order and accumulates ``.grad``
on every tensor that requires it. The tape lives only on the output tensors of
one forward pass, so dropping those outputs resets the graph; the training
loop builds a fresh graph every step.

float32 is the training dtype, float64 the verification dtype (gradient
checks). Tensor-tensor ops require matching dtypes; python scalars adopt the
tensor's dtype.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractViolation, NumericError

FLOAT_DTYPES = (np.float32, np.float64)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """n-dimensional array with optional gradient accumulation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        """Add `g` into the grad buffer. `own=True` promises the caller just
        allocated `g` exclusively for this tensor, letting the first
        accumulation adopt the buffer instead of copying."""
        if self.grad is None:
            if own and g.flags.owndata and g.flags.writeable:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    # -- autodiff -----------------------------------------------------------

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor. Scalar tensors seed with 1."""
        if seed is None:
            if self.size != 1:
                raise ContractViolation("backward() without a seed needs a scalar tensor")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(seed, dtype=self.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # non-leaf grads are transit storage only; free them eagerly
                if node._parents and node is not self:
                    node.grad = None

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    """Build an op output; records the tape only when some parent needs grad."""
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_dtypes(a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise ContractViolation(f"dtype mismatch: {a.dtype} vs {b.dtype}")


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_dtypes(a, b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a._accumulate(ga, own=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape)
            b._accumulate(gb, own=gb is not g)

    return _make(data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_dtypes(a, b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a._accumulate(ga, own=ga is not g)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape), own=True)

    return _make(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_dtypes(a, b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape), own=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape), own=True)

    return _make(data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _check_dtypes(a, b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape), own=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape), own=True)

    return _make(data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    data = a.data**exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0), own=True)

    return _make(data, (a,), backward)


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data, own=True)

    return _make(data, (a,), backward)


def tlog(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data, own=True)

    return _make(data, (a,), backward)


def tsqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / data, own=True)

    return _make(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0), own=True)

    return _make(data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = (x * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        a._accumulate(g * (cdf + x * pdf).astype(x.dtype), own=True)

    return _make(data, (a,), backward)


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    data = a.data.transpose(axes)

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _make(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    dt = tensors[0].dtype
    for t in tensors:
        if t.dtype != dt:
            raise ContractViolation("concat requires uniform dtype")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(data, tuple(tensors), backward)


def _key_has_fancy_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]
    fancy = _key_has_fancy_index(key)

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, key, g)  # repeated indices must accumulate
        else:
            full[key] += g
        a._accumulate(full, own=True)

    return _make(data, (a,), backward)


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Row select along axis 0 (embedding-select)."""
    idx = np.asarray(indices)
    data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full, own=True)

    return _make(data, (a,), backward)


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g if axis is None or keepdims else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, a.shape))

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g if axis is None or keepdims else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, a.shape) / n, own=True)

    return _make(data, (a,), backward)


def masked_sum(a: Tensor, mask: np.ndarray) -> Tensor:
    """Sum of entries where mask is truthy; mask is a constant."""
    m = np.asarray(mask).astype(a.dtype)
    if m.shape != a.shape:
        m = np.broadcast_to(m, a.shape)
    data = (a.data * m).sum()

    def backward(g):
        a._accumulate(g * m, own=True)

    return _make(np.asarray(data, dtype=a.dtype), (a,), backward)


# -- matmul -------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting; both operands ndim >= 2."""
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul operands must have ndim >= 2")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            a._accumulate(_unbroadcast(ga, a.shape), own=True)
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape), own=True)

    return _make(data, (a, b), backward)


# -- normalization / softmax ----------------------------------------------------


def softmax(a: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Row-stable softmax over `axis` of logits/temperature."""
    if temperature <= 0:
        raise ConfigError(f"softmax temperature must be positive, got {temperature}")
    x = a.data
    if np.isnan(x).any():
        raise NumericError("softmax input contains NaN")
    z = (x - x.max(axis=axis, keepdims=True)) / temperature
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate((data * (g - dot)) / temperature, own=True)

    return _make(data, (a,), backward)


def log_softmax(a: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if temperature <= 0:
        raise ConfigError(f"log_softmax temperature must be positive, got {temperature}")
    x = a.data
    if np.isnan(x).any():
        raise NumericError("log_softmax input contains NaN")
    z = (x - x.max(axis=axis, keepdims=True)) / temperature
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse
    probs = np.exp(data)

    def backward(g):
        gsum = g.sum(axis=axis, keepdims=True)
        a._accumulate((g - probs * gsum) / temperature, own=True)

    return _make(data, (a,), backward)


def layer_normalize(a: Tensor, eps: float = 1e-6) -> Tensor:
    """(x - mean) / sqrt(var + eps) over the last axis, no affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = xc * inv

    def backward(g):
        # dx = inv * (g - mean(g) - y * mean(g*y)) per row
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * data).mean(axis=-1, keepdims=True)
        a._accumulate(inv * (g - gm - data * gym), own=True)

    return _make(data, (a,), backward)


def l2_normalize(a: Tensor, eps: float = 1e-12, axis: int = -1) -> Tensor:
    """x / sqrt(sum(x^2) + eps) along `axis` (composition-free primitive)."""
    x = a.data
    sq = (x * x).sum(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(sq + eps)
    data = x * inv

    def backward(g):
        dot = (g * x).sum(axis=axis, keepdims=True)
        a._accumulate(inv * g - (inv**3 * dot) * x, own=True)

    return _make(data, (a,), backward)


# -- constructors ---------------------------------------------------------------


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled into [-2 std, 2 std]."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)
