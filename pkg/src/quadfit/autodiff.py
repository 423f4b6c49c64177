"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Var wraps an ndarray and remembers how it was produced; backward() walks
the recorded graph once in reverse topological order. Heavy geometric
primitives (mesh posing, projection, rasterized losses) register themselves
as single fused nodes with hand-derived vector-Jacobian products, so the
graph stays small even for full fitting steps.

ParamStore is the named parameter registry used by the optimizer: slots are
flat named arrays, leaves are created per step, and after one backward pass
every registered slot has a gradient (exact zero when the forward pass never
touched it).
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericalError

ArrayLike = "np.ndarray | float | Var"


class Var:
    """Node in the computation graph. `value` is always a float64 ndarray."""

    __slots__ = ("value", "parents", "vjp", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, value, parents=(), vjp=None, name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple[Var, ...] = tuple(parents)
        self.vjp: Callable | None = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    # arithmetic sugar -----------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.value + b.value, (a, b),
              lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)))
    return out


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.value.shape),
                          _unbroadcast(g * a.value, b.value.shape)))


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.value / b.value, (a, b),
               lambda g: (_unbroadcast(g / b.value, a.value.shape),
                          _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape)))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def vjp(g):
        av, bv = a.value, b.value
        if av.ndim == 1 and bv.ndim == 2:
            return g @ bv.T, np.outer(av, g)
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        return g @ bv.swapaxes(-1, -2), av.swapaxes(-1, -2) @ g

    return Var(a.value @ b.value, (a, b), vjp)


def vsum(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape).copy(),)

    return Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def vmean(a, axis=None) -> Var:
    a = as_var(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return vsum(a, axis=axis) * (1.0 / n)


def square(a) -> Var:
    a = as_var(a)
    return Var(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def exp(a) -> Var:
    a = as_var(a)
    ev = np.exp(a.value)
    return Var(ev, (a,), lambda g: (g * ev,))


def tanh(a) -> Var:
    a = as_var(a)
    tv = np.tanh(a.value)
    return Var(tv, (a,), lambda g: (g * (1.0 - tv * tv),))


def softplus(a) -> Var:
    """log(1 + exp(a)), evaluated stably for large |a|."""
    a = as_var(a)
    x = a.value
    val = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-x))
    return Var(val, (a,), lambda g: (g * sig,))


def _scatter_add(shape, idx, g) -> np.ndarray:
    """Zeros of `shape` with g scatter-added at integer row indices."""
    if (isinstance(idx, np.ndarray) and idx.dtype.kind in "iu" and idx.ndim == 1
            and len(shape) <= 2 and g.shape[0] == idx.shape[0]):
        n = shape[0]
        if len(shape) == 1:
            return np.bincount(idx, weights=g, minlength=n)
        cols = [np.bincount(idx, weights=g[:, d], minlength=n) for d in range(shape[1])]
        return np.stack(cols, axis=1)
    out = np.zeros(shape)
    np.add.at(out, idx, g)
    return out


def take(a, idx) -> Var:
    """Gather rows/elements by a constant index (fancy indexing)."""
    a = as_var(a)

    def vjp(g):
        return (_scatter_add(a.value.shape, idx, g),)

    return Var(a.value[idx], (a,), vjp)


def reshape(a, shape) -> Var:
    a = as_var(a)
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.value.shape),))


def concat(parts: Sequence, axis=0) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Var(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), vjp)


def rownorm(a, eps: float = 1e-12) -> Var:
    """Euclidean norm per row; gradient is zero at exactly-coincident points."""
    a = as_var(a)
    nv = np.sqrt(np.einsum("...d,...d->...", a.value, a.value))

    def vjp(g):
        denom = np.maximum(nv, eps)
        return ((g / denom)[..., None] * a.value,)

    return Var(nv, (a,), vjp)


def sqnorm(a) -> Var:
    """Squared Euclidean norm per row."""
    a = as_var(a)
    return Var(np.einsum("...d,...d->...", a.value, a.value), (a,),
               lambda g: (2.0 * g[..., None] * a.value,))


def custom(value: np.ndarray, parents: Iterable[Var], vjp: Callable, name: str = "") -> Var:
    """Register a fused op with a hand-derived vector-Jacobian product."""
    return Var(value, tuple(parents), vjp, name=name)


# ---------------------------------------------------------------------------
# backward pass


def _topo(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var) -> dict[int, np.ndarray]:
    """Gradients of the scalar `root` w.r.t. every node, keyed by id()."""
    if root.value.size != 1:
        raise ValueError("backward() expects a scalar root")
    if not np.isfinite(root.value):
        raise NumericalError(f"non-finite value in forward pass at node {root.name or '<scalar>'}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(_topo(root)):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = np.array(pg, dtype=np.float64, copy=True)
            else:
                acc += pg
    return grads


def grad(root: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Gradient of scalar `root` w.r.t. each Var in `wrt` (zeros if untouched)."""
    table = backward(root)
    return [table.get(id(v), np.zeros_like(v.value)) for v in wrt]


class ParamStore:
    """Named registry of optimizable arrays.

    `leaf(name)` hands out the graph leaf for the current step; `grads(root)`
    runs one backward pass and returns a gradient per registered slot, exact
    zero for slots the forward pass never touched.
    """

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self._leaves: dict[str, Var] = {}

    def register(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise ValueError(f"slot {name!r} already registered")
        self.values[name] = np.array(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> list[str]:
        return list(self.values)

    def leaf(self, name: str) -> Var:
        if name not in self._leaves:
            self._leaves[name] = Var(self.values[name], name=name)
        return self._leaves[name]

    def new_step(self) -> None:
        self._leaves = {}

    def grads(self, root: Var) -> dict[str, np.ndarray]:
        table = backward(root)
        out = {}
        for name, value in self.values.items():
            leaf = self._leaves.get(name)
            g = table.get(id(leaf)) if leaf is not None else None
            if g is None:
                g = np.zeros_like(value)
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in slot {name!r}")
            out[name] = g
        return out
