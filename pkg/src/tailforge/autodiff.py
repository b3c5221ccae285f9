"""Reverse-mode automatic differentiation over dense float64 arrays.

Each operation builds a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.  Calling
:func:`backward` on a scalar walks the graph in reverse topological order and
adds the result into ``grad`` of every tensor that requires it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operation's shape rule."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.op = op
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = np.zeros_like(values)
    out.requires_grad = needs
    out.node_id = next(_ids)
    out.op = op
    # tensors that need no gradient keep no edges, so frozen subgraphs are never visited
    out._parents = tuple(parents) if needs else ()
    out._backward = backward_fn if needs else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.values + b.values, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.values - b.values, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.values, b.values

    def bw(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _make(av * bv, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.values * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    gate = a.values > 0
    return _make(np.where(gate, a.values, 0.0), (a,), lambda g: (g * gate,), "relu")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.values)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.values
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _make(y, (a,), lambda g: (g / x,), "log")


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant exponent."""
    p = float(p)
    x = a.values
    y = x**p

    def bw(g):
        if p == 0.0:
            return (np.zeros_like(x),)
        return (g * p * x ** (p - 1.0),)

    return _make(y, (a,), bw, "power")


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    y = np.sum(a.values, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(y, dtype=np.float64), (a,), bw, "sum")


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.values.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    if n == 0:
        raise ShapeError("mean", a.shape, detail="empty reduction")
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.values, b.values

    def bw(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), bw, "matmul")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Direct stride-1 convolution of ``B x C x H x W`` input with ``O x C x k x k`` kernels."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv2d", w.shape, b.shape, detail="bias must have one entry per output channel")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    p = int(padding)
    Ho, Wo = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    xp = np.pad(x.values, ((0, 0), (0, 0), (p, p), (p, p)))
    wv = w.values
    out = np.zeros((B, O, Ho, Wo))
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u : u + Ho, v : v + Wo]
            out += np.einsum("bchw,oc->bohw", patch, wv[:, :, u, v])
    if b is not None:
        out += b.values[None, :, None, None]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wv)
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u : u + Ho, v : v + Wo] += np.einsum("bohw,oc->bchw", g, wv[:, :, u, v])
                gw[:, :, u, v] = np.einsum("bohw,bchw->oc", g, xp[:, :, u : u + Ho, v : v + Wo])
        gx = gxp[:, :, p : p + H, p : p + W]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "conv2d")


# ---------------------------------------------------------------- row-wise ops


def _require_2d(op: str, a: Tensor) -> None:
    if a.ndim != 2:
        raise ShapeError(op, a.shape, detail="expected a 2-D tensor")


def softmax(a: Tensor) -> Tensor:
    _require_2d("softmax", a)
    z = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    _require_2d("log_softmax", a)
    z = a.values - a.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(y, (a,), bw, "log_softmax")


def l2_normalize(a: Tensor) -> Tensor:
    _require_2d("l2_normalize", a)
    n = np.sqrt((a.values**2).sum(axis=1, keepdims=True))
    dead = np.flatnonzero(n[:, 0] == 0.0)
    if dead.size:
        raise ValueError(f"l2_normalize: row {int(dead[0])} has zero norm")
    y = a.values / n

    def bw(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / n,)

    return _make(y, (a,), bw, "l2_normalize")


def pairwise_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distances between rows, ``|a|^2 + |b|^2 - 2 a.b`` clamped at 0."""
    _require_2d("pairwise_sq_dist", a)
    _require_2d("pairwise_sq_dist", b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError("pairwise_sq_dist", a.shape, b.shape)
    av, bv = a.values, b.values
    raw = (av**2).sum(axis=1)[:, None] + (bv**2).sum(axis=1)[None, :] - 2.0 * av @ bv.T
    keep = raw > 0

    def bw(g):
        G = g * keep
        ga = 2.0 * (G.sum(axis=1)[:, None] * av - G @ bv)
        gb = 2.0 * (G.sum(axis=0)[:, None] * bv - G.T @ av)
        return ga, gb

    return _make(np.where(keep, raw, 0.0), (a, b), bw, "pairwise_sq_dist")


# ---------------------------------------------------------------- structural


def gather_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows", a.shape, idx.shape, detail="index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def bw(g):
        out = np.zeros_like(a.values)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.values[idx], (a,), bw, "gather_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _make(np.concatenate([t.values for t in tensors], axis=ax), tensors, bw, "concat")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        y = a.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _make(y, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor) -> Tensor:
    _require_2d("transpose", a)
    return _make(a.values.T.copy(), (a,), lambda g: (g.T,), "transpose")


# ---------------------------------------------------------------- graph + backward


@dataclass(frozen=True)
class NodeRecord:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class ComputationGraph:
    nodes: list[NodeRecord] = field(default_factory=list)
    tensors: list[Tensor] = field(default_factory=list, repr=False)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        records = [NodeRecord(t.op, tuple(p.node_id for p in t._parents), t.node_id) for t in order]
        return cls(records, order)


def backward(root: Tensor, graph: ComputationGraph | None = None) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable tensor needing it."""
    if root.values.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    graph = graph or ComputationGraph.trace(root)
    adj: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
    for t in reversed(graph.tensors):
        g = adj.pop(id(t), None)
        if g is None:
            continue
        t.grad = t.grad + g
        if t._backward is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            adj[key] = adj[key] + pg if key in adj else pg


# ---------------------------------------------------------------- verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and central differences."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    if not np.all(np.isfinite(out.values)):
        raise NonFiniteError("grad_check: f returned a non-finite value")
    backward(out)
    analytic = x.grad.copy()
    x.zero_grad()

    flat = x.values.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = f(x).item()
        flat[i] = orig - epsilon
        fm = f(x).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"grad_check: non-finite value while perturbing coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * epsilon)
    a = analytic.reshape(-1)
    rel = np.abs(a - numeric) / np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
