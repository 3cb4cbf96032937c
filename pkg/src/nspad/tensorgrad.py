"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Values are computed eagerly as nodes are appended to a :class:`Graph`; a
single :meth:`Graph.backward` sweep over the tape in reverse order fills the
gradient slots.

>>> g = Graph()
>>> x = g.parameter([1.0, 2.0])
>>> y = g.sum(x * x)
>>> g.backward(y)[x.id]
array([2., 4.])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf."""


class Node:
    __slots__ = ("graph", "id", "op", "inputs", "value", "grad", "name", "_vjp")

    def __init__(self, graph, id, op, inputs, value, vjp, name=None):
        self.graph = graph
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.name = name
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def _lift(self, other) -> "Node":
        return other if isinstance(other, Node) else self.graph.constant(other)

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    def __radd__(self, other):
        return self.graph.add(self._lift(other), self)

    def __sub__(self, other):
        return self.graph.subtract(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.subtract(self._lift(other), self)

    def __mul__(self, other):
        return self.graph.multiply(self, self._lift(other))

    def __rmul__(self, other):
        return self.graph.multiply(self._lift(other), self)

    def __matmul__(self, other):
        return self.graph.matmul(self, self._lift(other))

    def __neg__(self):
        return self.graph.subtract(self.graph.constant(0.0), self)

    def __getitem__(self, key):
        return self.graph.slice(self, key)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Node, b: Node) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


class Graph:
    """Append-only tape of nodes. Confine one graph to one thread."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.parameters: list[Node] = []
        self.check_finite = check_finite

    def _append(self, op: str, inputs: tuple[Node, ...], value, vjp: Callable | None, name=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if self.check_finite and not np.isfinite(value).all():
            raise NonFiniteError(f"{op} produced a non-finite value")
        node = Node(self, len(self.nodes), op, inputs, value, vjp, name)
        self.nodes.append(node)
        return node

    # -- leaves ------------------------------------------------------------

    def constant(self, value) -> Node:
        return self._append("constant", (), np.array(value, dtype=np.float64), None)

    def parameter(self, value, name: str | None = None) -> Node:
        node = self._append("parameter", (), np.array(value, dtype=np.float64), None, name)
        self.parameters.append(node)
        return node

    # -- elementwise arithmetic (numpy broadcasting) -----------------------

    def add(self, a: Node, b: Node) -> Node:
        _broadcast_shape("add", a, b)
        return self._append("add", (a, b), a.value + b.value,
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    def subtract(self, a: Node, b: Node) -> Node:
        _broadcast_shape("subtract", a, b)
        return self._append("subtract", (a, b), a.value - b.value,
                            lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))

    def multiply(self, a: Node, b: Node) -> Node:
        _broadcast_shape("multiply", a, b)
        return self._append("multiply", (a, b), a.value * b.value,
                            lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return self._append("matmul", (a, b), a.value @ b.value,
                            lambda g: (g @ b.value.T, a.value.T @ g))

    def power(self, x: Node, p: float) -> Node:
        """``x ** p`` for ``x >= 0``; the derivative at ``x == 0`` is taken as 0."""
        if (x.value < 0).any():
            raise DomainError(f"power: negative input (min {x.value.min()})")
        p = float(p)
        xv = x.value
        out = np.power(xv, p)

        def vjp(g):
            pos = xv > 0
            d = np.zeros_like(xv)
            d[pos] = p * np.power(xv[pos], p - 1.0)
            return (g * d,)

        return self._append("power", (x,), out, vjp)

    def exp(self, x: Node) -> Node:
        with np.errstate(over="ignore"):
            out = np.exp(x.value)
        return self._append("exp", (x,), out, lambda g: (g * out,))

    def log(self, x: Node) -> Node:
        if (x.value <= 0).any():
            raise DomainError(f"log: non-positive input (min {x.value.min()})")
        xv = x.value
        return self._append("log", (x,), np.log(xv), lambda g: (g / xv,))

    def sigmoid(self, x: Node) -> Node:
        xv = x.value
        out = np.empty_like(xv)
        pos = xv >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
        ez = np.exp(xv[~pos])
        out[~pos] = ez / (1.0 + ez)
        return self._append("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        return self._append("relu", (x,), np.where(mask, x.value, 0.0), lambda g: (g * mask,))

    def softmax(self, x: Node, axis: int = -1) -> Node:
        shifted = x.value - x.value.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def vjp(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return self._append("softmax", (x,), out, vjp)

    def clamp(self, x: Node, lo: float, hi: float) -> Node:
        if lo > hi:
            raise DomainError(f"clamp: lo={lo} > hi={hi}")
        mask = (x.value >= lo) & (x.value <= hi)
        return self._append("clamp", (x,), np.clip(x.value, lo, hi), lambda g: (g * mask,))

    # -- reductions --------------------------------------------------------

    def sum(self, x: Node, axis: int | None = None, keepdims: bool = False) -> Node:
        shape = x.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._append("sum", (x,), x.value.sum(axis=axis, keepdims=keepdims), vjp)

    def mean(self, x: Node, axis: int | None = None, keepdims: bool = False) -> Node:
        count = x.value.size if axis is None else x.shape[axis]
        if count == 0:
            raise ShapeError(f"mean over an empty axis of shape {x.shape}")
        shape = x.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, shape).copy(),)

        return self._append("mean", (x,), x.value.mean(axis=axis, keepdims=keepdims), vjp)

    def _extremum(self, op: str, x: Node, axis: int) -> Node:
        if x.shape[axis] == 0:
            raise ShapeError(f"{op} over an empty axis of shape {x.shape}")
        pick = np.argmax if op == "max" else np.argmin
        idx = np.expand_dims(pick(x.value, axis=axis), axis)
        out = np.take_along_axis(x.value, idx, axis=axis).squeeze(axis)
        shape = x.shape

        def vjp(g):
            d = np.zeros(shape)
            np.put_along_axis(d, idx, np.expand_dims(g, axis), axis=axis)
            return (d,)

        return self._append(op, (x,), out, vjp)

    def max(self, x: Node, axis: int = -1) -> Node:
        """Maximum along ``axis``; the subgradient goes to the first maximiser."""
        return self._extremum("max", x, axis)

    def min(self, x: Node, axis: int = -1) -> Node:
        return self._extremum("min", x, axis)

    # -- structure ---------------------------------------------------------

    def concat(self, xs: Sequence[Node], axis: int = 0) -> Node:
        xs = tuple(xs)
        if not xs:
            raise ShapeError("concat of no inputs")
        try:
            out = np.concatenate([x.value for x in xs], axis=axis)
        except ValueError:
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return self._append("concat", xs, out, lambda g: tuple(np.split(g, bounds, axis=axis)))

    def slice(self, x: Node, key) -> Node:
        """Index with any numpy key (basic or integer-array)."""
        try:
            out = x.value[key]
        except IndexError as exc:
            raise ShapeError(f"slice: {exc} for shape {x.shape}") from None
        shape = x.shape

        def vjp(g):
            d = np.zeros(shape)
            np.add.at(d, key, g)
            return (d,)

        return self._append("slice", (x,), out, vjp)

    def reshape(self, x: Node, shape: Sequence[int]) -> Node:
        old = x.shape
        try:
            out = x.value.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
        return self._append("reshape", (x,), out, lambda g: (g.reshape(old),))

    # -- differentiation ---------------------------------------------------

    def backward(self, root: Node) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar ``root``; returns ``{parameter id: gradient}``."""
        if root.graph is not self:
            raise ValueError("root belongs to a different graph")
        if root.value.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes[: root.id + 1]):
            if node.grad is None or node._vjp is None:
                continue
            for parent, g in zip(node.inputs, node._vjp(node.grad)):
                parent.grad = g if parent.grad is None else parent.grad + g
        for p in self.parameters:
            if p.grad is None:
                p.grad = np.zeros_like(p.value)
        return {p.id: p.grad for p in self.parameters}


def finite_diff_check(
    f: Callable[..., Node],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
) -> float:
    """Largest relative disagreement between backward and central-difference gradients.

    ``f(graph, *param_nodes)`` must build a scalar node. The error for one
    coordinate is ``|a - g| / max(1, |a|, |g|)`` with ``a`` the analytic and
    ``g`` the numeric derivative.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    g = Graph()
    nodes = [g.parameter(p) for p in params]
    grads = g.backward(f(g, *nodes))
    analytic = [grads[n.id] for n in nodes]

    def value(vals):
        gg = Graph()
        return float(f(gg, *[gg.constant(v) for v in vals]).value)

    worst = 0.0
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value(params)
            flat[i] = orig - h
            down = value(params)
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            a = analytic[k].reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
