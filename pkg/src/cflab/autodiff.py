"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, while recording is enabled, the
operation that produced it.  :func:`grad` walks the recorded graph in reverse
topological order.  With ``create_graph=True`` the backward pass is itself
built from recorded operations, so its result can be differentiated again;
this is what exact second-order meta-gradients need.

The elementwise helpers (:func:`sigmoid`, :func:`tanh`, :func:`exp`, ...)
accept plain arrays too and then fall through to numpy, so model code written
against them runs untracked at numpy speed.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "NumericError",
    "grad",
    "value_and_grad",
    "no_record",
    "is_recording",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "where",
    "stack",
    "concat",
]


class _State(threading.local):
    # per thread, so concurrent evaluations cannot switch each other's recording off
    recording = True


_STATE = _State()


class NumericError(FloatingPointError):
    """A forward value or gradient became non-finite."""


def is_recording() -> bool:
    return _STATE.recording


@contextlib.contextmanager
def no_record():
    """Evaluate without building a graph."""
    with _recording(False):
        yield


@contextlib.contextmanager
def _recording(flag: bool):
    prev = _STATE.recording
    _STATE.recording = flag
    try:
        yield
    finally:
        _STATE.recording = prev


class Tensor:
    """An array node in the computation graph.

    ``backward`` maps the incoming gradient (a Tensor) to one gradient per
    parent, expressed with Tensor operations so it can be recorded.
    """

    __slots__ = ("data", "requires_grad", "parents", "backward", "op")
    # make ndarray binops return NotImplemented so the reflected Tensor op runs
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward = backward
        self.op = op

    # construction helpers -------------------------------------------------

    @staticmethod
    def _make(data, parents: tuple, backward: Callable, op: str) -> "Tensor":
        if _STATE.recording and any(p.requires_grad for p in parents):
            return Tensor(data, True, parents, backward, op)
        return Tensor(data, op=op)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{tag})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        if not other.requires_grad:
            return mul(self, Tensor(1.0 / other.data))
        return mul(self, reciprocal(other))

    def __rtruediv__(self, other):
        return mul(_lift(other), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __rmatmul__(self, other):
        return matmul(_lift(other), self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return reduce_sum(self, axis) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    return sum_to(g, shape)


# primitive operations --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = _unbroadcast(mul(g, b), sa) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), sb) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def reciprocal(a: Tensor) -> Tensor:
    out_data = 1.0 / a.data

    def backward(g):
        return (neg(mul(g, mul(out, out))),)

    out = Tensor._make(out_data, (a,), backward, "reciprocal")
    return out


def power(a: Tensor, k: float) -> Tensor:
    """Elementwise ``a ** k`` for a constant exponent."""
    k = float(k)

    def backward(g):
        if k == 1.0:
            return (g,)
        return (mul(g, mul(power(a, k - 1.0), k)),)

    return Tensor._make(a.data ** k, (a,), backward, f"pow{k:g}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""

    def backward(g):
        # promote vectors to matrices so both adjoints are plain products
        a2 = a if a.ndim == 2 else reshape(a, (1, -1))
        b2 = b if b.ndim == 2 else reshape(b, (-1, 1))
        g2 = reshape(g, (a2.shape[0], b2.shape[1]))
        ga = reshape(matmul(g2, transpose(b2)), a.shape) if a.requires_grad else None
        gb = reshape(matmul(transpose(a2), g2), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    return Tensor._make(a.data.T, (a,), lambda g: (transpose(g),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),), "reshape")


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(g.data, axis).shape)
        return (broadcast_to(g, shape),)

    return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    data = np.broadcast_to(a.data, shape)
    return Tensor._make(data, (a,), lambda g: (sum_to(g, old),), "broadcast")


def sum_to(a: Tensor, shape) -> Tensor:
    """Sum ``a`` down to ``shape`` (inverse of broadcasting)."""
    data = a.data
    lead = data.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and data.shape[i + lead] != 1
    )
    out = data.sum(axis=axes, keepdims=True) if axes else data
    out = out.reshape(shape)
    big = a.shape
    return Tensor._make(out, (a,), lambda g: (broadcast_to(g, big),), "sum_to")


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def backward(g):
        return (scatter(g, idx, shape),)

    return Tensor._make(a.data[idx], (a,), backward, "getitem")


def scatter(a: Tensor, idx, shape) -> Tensor:
    """Place ``a`` at ``idx`` inside zeros of ``shape``; adjoint of getitem."""
    data = np.zeros(shape)
    np.add.at(data, idx, a.data) if _is_fancy(idx) else data.__setitem__(idx, a.data)
    return Tensor._make(data, (a,), lambda g: (getitem(g, idx),), "scatter")


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def _unary(fn: Callable, deriv: Callable, name: str):
    def op(a):
        if not isinstance(a, Tensor):
            return fn(np.asarray(a, dtype=np.float64))

        def backward(g):
            return (mul(g, deriv(a, out)),)

        out = Tensor._make(fn(a.data), (a,), backward, name)
        return out

    op.__name__ = name
    return op


def _np_sigmoid(x):
    return expit(x)


sigmoid = _unary(_np_sigmoid, lambda a, out: mul(out, 1.0 - out), "sigmoid")
tanh = _unary(np.tanh, lambda a, out: 1.0 - mul(out, out), "tanh")
exp = _unary(np.exp, lambda a, out: out, "exp")
log = _unary(np.log, lambda a, out: reciprocal(a), "log")
sqrt = _unary(np.sqrt, lambda a, out: mul(reciprocal(out), 0.5), "sqrt")


def where(mask, a, b):
    """Select ``a`` where the constant ``mask`` holds, else ``b``."""
    mask = np.asarray(mask, dtype=bool)
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.where(mask, a, b)
    a, b = _lift(a), _lift(b)
    m = Tensor(mask.astype(np.float64))
    return add(mul(a, m), mul(b, 1.0 - m))


def stack(items: Sequence, axis: int = -1):
    if not any(isinstance(t, Tensor) for t in items):
        return np.stack(items, axis=axis)
    items = [_lift(t) for t in items]
    data = np.stack([t.data for t in items], axis=axis)
    ax = axis if axis >= 0 else data.ndim + axis

    def backward(g):
        outs = []
        for i in range(len(items)):
            idx = (slice(None),) * ax + (i,)
            outs.append(getitem(g, idx))
        return tuple(outs)

    return Tensor._make(data, tuple(items), backward, "stack")


def concat(items: Sequence, axis: int = 0):
    if not any(isinstance(t, Tensor) for t in items):
        return np.concatenate(items, axis=axis)
    items = [_lift(t) for t in items]
    data = np.concatenate([t.data for t in items], axis=axis)
    ax = axis if axis >= 0 else data.ndim + axis
    bounds = np.cumsum([0] + [t.shape[ax] for t in items])

    def backward(g):
        return tuple(
            getitem(g, (slice(None),) * ax + (slice(int(lo), int(hi)),))
            for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return Tensor._make(data, tuple(items), backward, "concat")


# gradients -------------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def _first_nonfinite(root: Tensor) -> Tensor | None:
    for node in _toposort(root):
        if not np.all(np.isfinite(node.data)):
            return node
    return None


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each of ``inputs``.

    Every node is visited once, in reverse topological order.  When
    ``create_graph`` is set the returned gradients carry their own graph and
    can be differentiated again.
    """
    if output.data.size != 1:
        raise ValueError("grad needs a scalar output")
    if not np.isfinite(output.data).all():
        bad = _first_nonfinite(output)
        name = bad.op if bad is not None else output.op
        raise NumericError(f"non-finite value at node '{name}'")
    if not output.requires_grad:
        return [Tensor(np.zeros_like(x.data)) for x in inputs]

    order = _toposort(output)
    grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    wanted = {id(x) for x in inputs}
    # only nodes with a path down to some input can carry a useful gradient;
    # skipping the rest matters when the inputs are themselves deep in a graph
    reaches = set()
    for node in order:
        if id(node) in wanted or any(id(p) in reaches for p in node.parents):
            reaches.add(id(node))
    kept: dict[int, Tensor] = {}
    with _recording(create_graph):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                kept[id(node)] = g
            if node.backward is None or not any(id(p) in reaches for p in node.parents):
                continue
            pgrads = node.backward(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or id(p) not in reaches:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)

    out = []
    for x in inputs:
        g = kept.get(id(x))
        if g is None:
            g = Tensor(np.zeros_like(x.data))
        if not np.all(np.isfinite(g.data)):
            raise NumericError(f"non-finite gradient flowing into node '{x.op}'")
        out.append(g)
    return out


def value_and_grad(fn: Callable[[Tensor], Tensor], theta, create_graph: bool = False):
    """Evaluate ``fn(theta)`` and its gradient with respect to ``theta``.

    ``theta`` may be an array (a fresh leaf is created) or a Tensor already
    in a graph, in which case the gradient is taken with respect to it.
    """
    if not isinstance(theta, Tensor) or not theta.requires_grad:
        theta = Tensor(np.array(_lift(theta).data, dtype=np.float64), requires_grad=True)
    with _recording(True):
        value = fn(theta)
    (g,) = grad(value, [theta], create_graph=create_graph)
    return value, g
