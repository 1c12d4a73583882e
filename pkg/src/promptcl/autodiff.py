"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is fixed and closed: everything downstream (encoders, losses,
factor reconstruction) is composed from the functions in this module, so
the whole differentiable surface is auditable and finite-difference
checkable in one place. All math is float64; no NaN/Inf should survive a
documented op on finite inputs.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class Tensor:
    """A value node on the implicit tape.

    Holds a float64 ndarray plus the parent links and vector-Jacobian
    products needed for one backward sweep. Tensors are treated as
    immutable after construction.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _vjps=(), name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._vjps = _vjps
        self.name = name

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

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    """A trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def _tracked(*xs: Tensor) -> bool:
    return any(x.requires_grad or x._parents for x in xs)


def _node(data, parents, vjps) -> Tensor:
    if _tracked(*parents):
        return Tensor(data, _parents=tuple(parents), _vjps=tuple(vjps))
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# the op set
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _node(out, (a, b), (
        lambda g: _unbroadcast(g, a.shape),
        lambda g: _unbroadcast(g, b.shape),
    ))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _node(out, (a, b), (
        lambda g: _unbroadcast(g * b.data, a.shape),
        lambda g: _unbroadcast(g * a.data, b.shape),
    ))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), (lambda g: g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = np.matmul(a.data, b.data)

    def vjp_a(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if b.ndim > 1 else np.multiply.outer(g, b.data)
        return _unbroadcast(ga, a.shape)

    def vjp_b(g):
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(gb, b.shape)

    if a.ndim == 1 or b.ndim == 1:
        # keep the 2-D fast path simple; promote vectors explicitly upstream
        raise ShapeError(f"matmul: 1-D operands unsupported, got {a.shape} @ {b.shape}")
    return _node(out, (a, b), (vjp_a, vjp_b))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[x.shape for x in xs]} do not align on axis {axis}")
    sizes = [x.shape[axis] for x in xs]
    offs = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offs[i]), int(offs[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _node(out, xs, tuple(make_vjp(i) for i in range(len(xs))))


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice [start, stop) along one axis."""
    x = as_tensor(x)
    if not (0 <= start <= stop <= x.shape[axis]):
        raise ShapeError(f"narrow: [{start},{stop}) out of range for axis {axis} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return full

    return _node(x.data[sl], (x,), (vjp,))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), (lambda g: g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), (lambda g: np.transpose(g, inv),))


def tsum(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, x.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()

    return _node(x.data.sum(axis=axis), (x,), (vjp,))


def mean(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    n = x.shape[axis]

    def vjp(g):
        return np.broadcast_to(np.expand_dims(g, axis), x.shape) / n

    return _node(x.data.mean(axis=axis), (x,), (vjp,))


def softmax(x: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax: non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot)

    return _node(out, (x,), (vjp,))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError(f"log: non-positive input (min={x.data.min()})")
    return _node(np.log(x.data), (x,), (lambda g: g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (x,), (lambda g: g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return _node(out, (x,), (lambda g: g * (x.data > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth, finite-difference friendly)."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * dinner)

    return _node(out, (x,), (vjp,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp_x(g):
        gx = g * gain.data
        return inv * (gx - gx.mean(axis=-1, keepdims=True)
                      - xhat * (gx * xhat).mean(axis=-1, keepdims=True))

    def vjp_gain(g):
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def vjp_bias(g):
        return g.reshape(-1, d).sum(axis=0)

    return _node(out, (x, gain, bias), (vjp_x, vjp_gain, vjp_bias))


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Unit-normalize over the last axis."""
    x = as_tensor(x)
    nrm = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True) + eps)
    out = x.data / nrm

    def vjp(g):
        return (g - out * (g * out).sum(axis=-1, keepdims=True)) / nrm

    return _node(out, (x,), (vjp,))


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity over the last axis (composed op)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine: shapes {a.shape} and {b.shape} differ")
    return tsum(mul(l2_normalize(a), l2_normalize(b)), axis=-1)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into an embedding table; gradient scatter-adds."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ShapeError(f"embed: id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return full

    return _node(out, (table,), (vjp,))


def cp3(d1: Tensor, d2: Tensor, d3: Tensor) -> Tensor:
    """Rank-averaged three-way outer product:
    out[i,j,k] = (1/r) * sum_t d1[i,t] * d2[j,t] * d3[k,t].
    """
    d1, d2, d3 = as_tensor(d1), as_tensor(d2), as_tensor(d3)
    if not (d1.ndim == d2.ndim == d3.ndim == 2) or not (d1.shape[1] == d2.shape[1] == d3.shape[1]):
        raise ShapeError(f"cp3: rank axes differ: {d1.shape}, {d2.shape}, {d3.shape}")
    r = d1.shape[1]
    out = np.einsum("ir,jr,kr->ijk", d1.data, d2.data, d3.data) / r
    return _node(out, (d1, d2, d3), (
        lambda g: np.einsum("ijk,jr,kr->ir", g, d2.data, d3.data) / r,
        lambda g: np.einsum("ijk,ir,kr->jr", g, d1.data, d3.data) / r,
        lambda g: np.einsum("ijk,ir,jr->kr", g, d1.data, d2.data) / r,
    ))


# ---------------------------------------------------------------------------
# backward sweep
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate `.grad` on every reachable leaf from a scalar loss node."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        for p, vjp in zip(node._parents, node._vjps):
            if not (p.requires_grad or p._parents):
                continue
            pg = vjp(g)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between backward() gradients and central differences.

    The denominator is max(|analytic|, |numeric|, 1e-8) per coordinate;
    errors are reported as values, never raised.
    """
    zero_grads(params)
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            dn = float(f().data)
            flat[i] = orig
            num = (up - dn) / (2 * h)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    zero_grads(params)
    return worst
