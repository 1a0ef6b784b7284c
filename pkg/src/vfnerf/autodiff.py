"""Array-valued reverse-mode differentiation on a linear tape.

Every op accepts plain numpy arrays or :class:`Node` values.  When none of
the inputs is a node the op returns a plain array, so the same forward code
serves both traced training passes and untraced inference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class GradientError(RuntimeError):
    """Raised on misuse of a tape (re-use, non-scalar root, foreign nodes)."""


class UntracedParameterError(KeyError):
    """Raised when reading the gradient of a parameter that the last trace never touched."""


# --------------------------------------------------------------------------
# parameter storage
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    stop: int
    shape: tuple[int, ...]


class ParamStore:
    """Flat float64 parameter vector with a named segment table and a gradient of equal length."""

    def __init__(self, layout: Sequence[tuple[str, tuple[int, ...]]]):
        self.segments: dict[str, Segment] = {}
        offset = 0
        for name, shape in layout:
            if name in self.segments:
                raise ValueError(f"duplicate parameter name {name!r}")
            size = int(np.prod(shape, dtype=np.int64))
            self.segments[name] = Segment(name, offset, offset + size, tuple(int(s) for s in shape))
            offset += size
        self.data = np.zeros(offset, dtype=np.float64)
        self.grad = np.zeros(offset, dtype=np.float64)
        self.traced: set[str] = set()

    def __len__(self) -> int:
        return self.data.size

    def __contains__(self, name: str) -> bool:
        return name in self.segments

    def __getitem__(self, name: str) -> np.ndarray:
        seg = self.segments[name]
        return self.data[seg.start:seg.stop].reshape(seg.shape)

    def __setitem__(self, name: str, value) -> None:
        self[name][...] = value

    def names(self) -> list[str]:
        return list(self.segments)

    def var(self, name: str, tape: "Tape | None" = None):
        """The parameter as a traced leaf on ``tape``, or as a read-only view when untraced."""
        if tape is None:
            view = self[name]
            view.flags.writeable = False
            return view
        return tape.param(self, name)

    def grad_of(self, name: str) -> np.ndarray:
        if name not in self.segments:
            raise KeyError(name)
        if name not in self.traced:
            raise UntracedParameterError(f"parameter {name!r} was not part of the last traced pass")
        seg = self.segments[name]
        return self.grad[seg.start:seg.stop].reshape(seg.shape)

    def zero_grad(self) -> None:
        self.grad[:] = 0.0
        self.traced.clear()

    def copy(self) -> "ParamStore":
        other = ParamStore([(s.name, s.shape) for s in self.segments.values()])
        other.data[:] = self.data
        other.grad[:] = self.grad
        other.traced = set(self.traced)
        return other


# --------------------------------------------------------------------------
# tape and nodes
# --------------------------------------------------------------------------


class Node:
    """A value recorded on a tape together with the vector-Jacobian products to its parents."""

    __slots__ = ("value", "tape", "index", "links", "param")
    __array_ufunc__ = None  # make `ndarray op Node` defer to the reflected Node method

    def __init__(self, value: np.ndarray, tape: "Tape", links, param=None):
        self.value = value
        self.tape = tape
        self.links = links
        self.param = param
        self.index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Node(shape={self.shape}, index={self.index})"

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Records nodes in creation order; :meth:`backward` may run once per trace."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._params: dict[tuple[int, str], Node] = {}
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, node: Node) -> Node:
        if self.consumed:
            raise GradientError("tape already consumed by backward(); start a new trace")
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def param(self, store: ParamStore, name: str) -> Node:
        key = (id(store), name)
        node = self._params.get(key)
        if node is None:
            value = store[name].copy()
            node = self._push(Node(value, self, (), param=(store, name)))
            self._params[key] = node
        return node

    def watch(self, value) -> Node:
        """A free leaf (not backed by a ParamStore); its gradient lands in :attr:`leaf_grads`."""
        return self._push(Node(np.array(value, dtype=np.float64), self, ()))

    def backward(self, root: Node) -> dict[int, np.ndarray]:
        """Propagate d(root)/d(.) to every node; accumulate into the backing ParamStores.

        Returns gradients of free leaves created with :meth:`watch`, keyed by node index.
        """
        if self.consumed:
            raise GradientError("backward() already ran on this tape; re-trace before calling it again")
        if not isinstance(root, Node) or root.tape is not self:
            raise GradientError("root is not a node of this tape")
        if root.value.size != 1:
            raise GradientError(f"backward() needs a scalar root, got shape {root.value.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
        leaf_grads: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes[: root.index + 1]):
            g = grads.pop(node.index, None)
            if g is None:
                continue
            if node.param is not None:
                store, name = node.param
                seg = store.segments[name]
                store.grad[seg.start:seg.stop] += g.reshape(-1)
                store.traced.add(name)
                continue
            if not node.links:
                leaf_grads[node.index] = g
                continue
            for parent, vjp in node.links:
                pg = vjp(g)
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg
        # parameters that were traced but received no gradient still count as traced
        for (_, name), node in self._params.items():
            node.param[0].traced.add(name)
        # drop the graph: nodes and the tape reference each other, and leaving that
        # cycle to the garbage collector lets intermediate arrays pile up for many steps
        for node in self.nodes:
            node.links = ()
        self.nodes = []
        self._params = {}
        return leaf_grads


# --------------------------------------------------------------------------
# op plumbing
# --------------------------------------------------------------------------


def value(x) -> np.ndarray:
    """Underlying array of a node, or the input itself as an array."""
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def is_traced(x) -> bool:
    return isinstance(x, Node)


def _tape_of(inputs: Iterable) -> Tape | None:
    tape = None
    for x in inputs:
        if isinstance(x, Node):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise GradientError("op mixes nodes from different tapes")
    return tape


def _apply(out: np.ndarray, inputs: Sequence, vjps: Sequence[Callable]) -> Node | np.ndarray:
    tape = _tape_of(inputs)
    if tape is None:
        return out
    links = tuple((x, fn) for x, fn in zip(inputs, vjps) if isinstance(x, Node))
    return tape._push(Node(out, tape, links))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------


def add(a, b):
    av, bv = value(a), value(b)
    return _apply(av + bv, (a, b), (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    return _apply(av - bv, (a, b), (lambda g: _unbroadcast(g, av.shape), lambda g: -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    return _apply(
        av * bv,
        (a, b),
        (lambda g: _unbroadcast(g * bv, av.shape), lambda g: _unbroadcast(g * av, bv.shape)),
    )


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return _apply(
        out,
        (a, b),
        (lambda g: _unbroadcast(g / bv, av.shape), lambda g: _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a):
    return _apply(-value(a), (a,), (lambda g: -g,))


def power(a, p: float):
    av = value(a)
    if p == 2:
        return _apply(av * av, (a,), (lambda g: 2.0 * g * av,))
    return _apply(av**p, (a,), (lambda g: g * p * av ** (p - 1),))


def square(a):
    return power(a, 2)


def matmul(a, b):
    """2-D matrix product."""
    av, bv = value(a), value(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {av.shape} and {bv.shape}")
    return _apply(av @ bv, (a, b), (lambda g: g @ bv.T, lambda g: av.T @ g))


# --------------------------------------------------------------------------
# unary functions
# --------------------------------------------------------------------------


def linear(x, w, b, relu: bool = False):
    """Fused ``x @ w + b`` with an optional ReLU; one tape node per layer."""
    xv, wv, bv = value(x), value(w), value(b)
    if xv.ndim != 2 or wv.ndim != 2:
        raise ValueError(f"linear expects 2-D x and w, got {xv.shape} and {wv.shape}")
    out = xv @ wv
    out += bv
    if relu:
        np.maximum(out, 0.0, out=out)
    cache = {}

    def masked(g):
        # shared by the three input VJPs of one backward pass
        if not relu:
            return g
        if cache.get("g") is not g:
            cache["g"], cache["m"] = g, g * (out > 0)
        return cache["m"]

    return _apply(
        out,
        (x, w, b),
        (
            lambda g: masked(g) @ wv.T,
            lambda g: xv.T @ masked(g),
            lambda g: _unbroadcast(masked(g), bv.shape),
        ),
    )


def relu(a):
    av = value(a)
    return _apply(np.maximum(av, 0.0), (a,), (lambda g: g * (av > 0),))


def sin(a):
    av = value(a)
    return _apply(np.sin(av), (a,), (lambda g: g * np.cos(av),))


def cos(a):
    av = value(a)
    return _apply(np.cos(av), (a,), (lambda g: -g * np.sin(av),))


def exp(a):
    out = np.exp(value(a))
    return _apply(out, (a,), (lambda g: g * out,))


def log(a):
    av = value(a)
    return _apply(np.log(av), (a,), (lambda g: g / av,))


def sqrt(a):
    out = np.sqrt(value(a))
    return _apply(out, (a,), (lambda g: 0.5 * g / out,))


def abs_(a):
    av = value(a)
    return _apply(np.abs(av), (a,), (lambda g: g * np.sign(av),))


def sigmoid(a):
    """Logistic squashing, evaluated without overflow for large |a|."""
    av = value(a)
    e = np.exp(-np.abs(av))
    out = np.where(av >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _apply(out, (a,), (lambda g: g * out * (1.0 - out),))


def where(cond, a, b):
    c = np.asarray(cond, dtype=bool)
    av, bv = value(a), value(b)
    return _apply(
        np.where(c, av, bv),
        (a, b),
        (
            lambda g: _unbroadcast(np.where(c, g, 0.0), av.shape),
            lambda g: _unbroadcast(np.where(c, 0.0, g), bv.shape),
        ),
    )


# --------------------------------------------------------------------------
# reductions and vector ops
# --------------------------------------------------------------------------


def _expand(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    av = value(a)
    return _apply(av.sum(axis=axis, keepdims=keepdims), (a,), (lambda g: _expand(g, av.shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False):
    av = value(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return _apply(
        av.mean(axis=axis, keepdims=keepdims),
        (a,),
        (lambda g: _expand(g, av.shape, axis, keepdims) / n,),
    )


def cumsum(a, axis: int = -1):
    av = value(a)
    # reverse cumulative sum of the upstream gradient
    return _apply(
        np.cumsum(av, axis=axis),
        (a,),
        (lambda g: np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),),
    )


def norm(a, axis: int = -1, keepdims: bool = False):
    """Euclidean norm along ``axis``; the gradient at the zero vector is taken as zero."""
    av = value(a)
    n = np.sqrt((av * av).sum(axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    out = n if keepdims else np.squeeze(n, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return g * np.where(n > 0, av / safe, 0.0)

    return _apply(out, (a,), (vjp,))


def dot(a, b, axis: int = -1):
    av, bv = value(a), value(b)
    return _apply(
        (av * bv).sum(axis=axis),
        (a, b),
        (
            lambda g: _unbroadcast(np.expand_dims(g, axis) * bv, av.shape),
            lambda g: _unbroadcast(np.expand_dims(g, axis) * av, bv.shape),
        ),
    )


def cosine(a, b, eps: float = 1e-12, axis: int = -1):
    """Cosine similarity along ``axis`` with the denominator floored at ``eps``.

    A zero vector therefore yields a cosine of exactly 0.
    """
    av, bv = value(a), value(b)
    na = np.sqrt((av * av).sum(axis=axis, keepdims=True))
    nb = np.sqrt((bv * bv).sum(axis=axis, keepdims=True))
    num = (av * bv).sum(axis=axis, keepdims=True)
    raw = na * nb
    floored = raw <= eps
    den = np.where(floored, eps, raw)
    out = num / den
    cos_over_den = np.where(floored, 0.0, out / den)
    safe_na = np.where(na > 0, na, 1.0)
    safe_nb = np.where(nb > 0, nb, 1.0)

    def vjp_a(g):
        g = np.expand_dims(g, axis)
        # d(num/den)/da = b/den - num/den^2 * |b| a/|a|
        return _unbroadcast(g * (bv / den - cos_over_den * nb * av / safe_na), av.shape)

    def vjp_b(g):
        g = np.expand_dims(g, axis)
        return _unbroadcast(g * (av / den - cos_over_den * na * bv / safe_nb), bv.shape)

    return _apply(np.squeeze(out, axis=axis), (a, b), (vjp_a, vjp_b))


# --------------------------------------------------------------------------
# shape ops
# --------------------------------------------------------------------------


def reshape(a, shape):
    av = value(a)
    return _apply(av.reshape(shape), (a,), (lambda g: g.reshape(av.shape),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is None or i is Ellipsis or isinstance(i, (slice, int, np.integer)) for i in items)


def getitem(a, idx):
    av = value(a)
    basic = _is_basic_index(idx)

    def vjp(g):
        out = np.zeros_like(av)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return out

    return _apply(av[idx], (a,), (vjp,))


def concat(parts: Sequence, axis: int = -1):
    vals = [value(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    vjps = []
    for k in range(len(vals)):
        lo, hi = int(bounds[k]), int(bounds[k + 1])

        def vjp(g, lo=lo, hi=hi):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        vjps.append(vjp)
    return _apply(out, tuple(parts), tuple(vjps))


def pad_axis(a, before: int, after: int, axis: int, fill: float = 0.0):
    """Pad ``a`` with a constant along one axis."""
    av = value(a)
    widths = [(0, 0)] * av.ndim
    widths[axis] = (before, after)
    out = np.pad(av, widths, constant_values=fill)
    n = av.shape[axis]

    def vjp(g):
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(before, before + n)
        return g[tuple(sl)]

    return _apply(out, (a,), (vjp,))


def broadcast_to(a, shape):
    av = value(a)
    return _apply(np.broadcast_to(av, shape), (a,), (lambda g: _unbroadcast(g, av.shape),))


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------


def central_difference(fn: Callable[[], float], x: np.ndarray, index, h: float = 1e-5) -> float:
    """d fn / d x[index] by central differences; ``x`` is perturbed in place and restored."""
    orig = x[index]
    x[index] = orig + h
    up = float(fn())
    x[index] = orig - h
    down = float(fn())
    x[index] = orig
    return (up - down) / (2.0 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
