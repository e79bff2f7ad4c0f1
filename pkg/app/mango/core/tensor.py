"""
tensor.py

Dense float64 tensors with a define-by-run tape for reverse-mode gradients.

Operations only record when a Tape is active and at least one input requires
a gradient; evaluating a model outside a tape (sampling, inversion, oracles)
costs nothing beyond the numpy work. Every recorded node keeps its inputs
alive, so replaying the nodes backwards yields the adjoint of every leaf.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from mango.core import linalg
from mango.errors import ContractError, DimensionError

LAYERNORM_EPS = 1e-5

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """An n-dimensional float64 array plus gradient bookkeeping.

    Tensors are treated as immutable values: operations always allocate new
    arrays, and callers must not write into `data` of a tensor that has been
    used in a recorded operation.
    """

    # let numpy operators defer to the reflected Tensor methods
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named leaf tensor that always collects gradients."""

    def __init__(self, value, name: str):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def assign(self, value):
        """Replace the value; the shape must not change."""
        value = np.array(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise DimensionError(f"assign {self.name}", self.data.shape, value.shape)
        self.data = value


@dataclass(slots=True)
class _Node:
    output: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of primitive operations, inputs always before outputs.

    Usage:
        with Tape() as tape:
            loss = ...
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, output: Tensor) -> None:
        """Accumulate d(output)/d(leaf) into `.grad` of every recorded leaf."""
        if not isinstance(output, Tensor) or output.data.size != 1:
            shape = output.shape if isinstance(output, Tensor) else type(output).__name__
            raise ContractError(f"backward needs a scalar output, got shape {shape}")
        adjoints = {id(output): np.ones_like(output.data)}
        seen = {id(output): output}
        for node in reversed(self.nodes):
            g = adjoints.pop(id(node.output), None)
            if g is None:
                continue
            for tensor, grad in zip(node.inputs, node.vjp(g)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                adjoints[key] = adjoints[key] + grad if key in adjoints else grad
                seen.setdefault(key, tensor)
        for key, grad in adjoints.items():
            leaf = seen[key]
            leaf.grad = grad if leaf.grad is None else leaf.grad + grad


def backward(tape: Tape, output: Tensor) -> None:
    """Module-level spelling of Tape.backward."""
    tape.backward(output)


def zero_grad(params: Sequence[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    out = Tensor(data)
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPES[-1].nodes.append(_Node(out, inputs, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# -----------------------------
# Elementwise
# -----------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    return _record(a.data / b.data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / b.data ** 2, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out ** 2),))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    a = as_tensor(a)
    sigmoid = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(np.logaddexp(0.0, a.data), (a,), lambda g: (g * sigmoid,))


def inverse_softplus(y: float) -> float:
    """The raw value whose softplus is y (y > 0)."""
    return float(np.log(np.expm1(y)))


# -----------------------------
# Shape and reductions
# -----------------------------

def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError("transpose", a.shape)
    return _record(_swap(a.data), (a,), lambda g: (_swap(g),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", a.shape, shape) from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.array(np.broadcast_to(g, a.shape)),)

    return _record(out, (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    total = reduce_sum(a, axis=axis, keepdims=keepdims)
    count = a.size / max(total.size, 1)
    return div(total, count)


def concat(tensors: Sequence, axis: int = -2) -> Tensor:
    """Concatenate along an axis (the token axis by default)."""
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(a, indices, axis: int = -2) -> Tensor:
    """Gather slices along an axis; the adjoint scatters them back."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def vjp(g):
        moved = np.zeros(np.moveaxis(a.data, axis, 0).shape, dtype=np.float64)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (np.moveaxis(moved, 0, axis),)

    return _record(out, (a,), vjp)


def split(a, index: int, axis: int = -2) -> tuple[Tensor, Tensor]:
    """Split into [:index] and [index:] along an axis."""
    a = as_tensor(a)
    size = a.shape[axis]
    return take(a, np.arange(index), axis), take(a, np.arange(index, size), axis)


def diagonal(a) -> Tensor:
    """Diagonal of the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError("diagonal", a.shape)
    idx = np.arange(a.shape[-1])

    def vjp(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[..., idx, idx] = g
        return (full,)

    return _record(a.data[..., idx, idx], (a,), vjp)


# -----------------------------
# Linear algebra
# -----------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes; batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError("matmul", a.shape, b.shape) from None
    return _record(a.data @ b.data, (a, b),
                   lambda g: (_unbroadcast(g @ _swap(b.data), a.shape),
                              _unbroadcast(_swap(a.data) @ g, b.shape)))


def solve_triangular(a, b, lower: bool = False, unit_diagonal: bool = False) -> Tensor:
    """x with a @ x = b by substitution; never forms an inverse."""
    a, b = as_tensor(a), as_tensor(b)
    x = linalg.solve_triangular(a.data, b.data, lower=lower, unit_diagonal=unit_diagonal)

    def vjp(g):
        gb = linalg.solve_triangular(_swap(a.data), g, lower=not lower, unit_diagonal=unit_diagonal)
        ga = -(gb @ _swap(x))
        offset = 1 if unit_diagonal else 0
        ga = np.tril(ga, -offset) if lower else np.triu(ga, offset)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(x, (a, b), vjp)


# -----------------------------
# Attention and normalization
# -----------------------------

def masked_softmax(logits, mask) -> Tensor:
    """Row softmax over allowed entries; disallowed entries are exactly 0.

    The mask is applied additively: disallowed logits become -inf before the
    row max is subtracted, so exp() zeroes them bit for bit.
    """
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim < 2 or logits.shape[-1] != logits.shape[-2]:
        raise DimensionError("masked_softmax", logits.shape)
    if mask.shape != logits.shape[-2:]:
        raise DimensionError("masked_softmax", logits.shape, mask.shape)
    if not mask.any(axis=-1).all():
        raise ContractError("masked_softmax: every row needs at least one allowed entry")
    z = np.where(mask, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return _record(p, (logits,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def layernorm(x, gain, bias, eps: float = LAYERNORM_EPS) -> Tensor:
    """Per-row standardization over the last axis, then gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError("layernorm", x.shape, gain.shape, bias.shape)
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    out = x_hat * gain.data + bias.data

    def vjp(g):
        g_hat = g * gain.data
        gx = inv_std * (g_hat - g_hat.mean(axis=-1, keepdims=True)
                        - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * x_hat, gain.shape), _unbroadcast(g, bias.shape)

    return _record(out, (x, gain, bias), vjp)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    peak = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - peak)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (peak + np.log(total)).squeeze(axis)
    soft = shifted / total
    return _record(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,))
