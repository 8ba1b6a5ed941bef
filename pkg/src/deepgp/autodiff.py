"""Reverse-mode differentiation over dense float64 arrays.

Values are plain ``numpy.ndarray`` objects of dtype float64.  Every primitive
below takes :class:`Node` inputs (raw numbers and arrays are wrapped as
constants) and records a new node holding its value and a vector-Jacobian
product.  The tape is rebuilt on every evaluation, so the graph is whatever
the Python code happened to execute.

Primitive set: matmul, transpose, add, sub, mul, div, neg, exp, log, square,
sqrt, tanh, clamp_min, sum, mean, reshape, slice_axis, concat, cholesky,
solve_triangular, diag_part, trace.

Broadcasting is restricted to scalar-vs-tensor and a 1-D vector against the
trailing axis of a matrix.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "Node",
    "ShapeError",
    "NonFiniteError",
    "NotPositiveDefiniteError",
    "variable",
    "constant",
    "as_node",
    "no_grad",
    "forward",
    "backward",
    "grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "square",
    "sqrt",
    "tanh",
    "clamp_min",
    "matmul",
    "transpose",
    "sum",
    "mean",
    "reshape",
    "slice_axis",
    "concat",
    "cholesky",
    "solve_triangular",
    "diag_part",
    "trace",
]

_ids = itertools.count()
_recording = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or infinity."""

    def __init__(self, op: str, node_id: int):
        super().__init__(f"non-finite value produced by {op} (node {node_id})")
        self.op = op
        self.node_id = node_id


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


class Node:
    """One value on the tape.

    ``parents`` and ``vjp`` are empty for leaves and for anything created
    while recording is switched off.
    """

    __slots__ = ("value", "parents", "vjp", "op", "name", "id")
    __array_priority__ = 100

    def __init__(self, value, parents=(), vjp=None, op="const", name=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Node":
        return transpose(self)

    def __float__(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node<{self.op}{label} shape={self.value.shape}>"

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

    def __getitem__(self, item):
        raise TypeError("use slice_axis() for differentiable indexing")


def _array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def variable(value, name: str | None = None) -> Node:
    """A leaf whose gradient :func:`backward` reports."""
    return Node(_array(value).copy(), op="leaf", name=name)


def constant(value) -> Node:
    return Node(_array(value))


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate primitives without recording parents (values only)."""
    global _recording
    previous = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = previous


def _record(op: str, value: np.ndarray, parents: tuple, vjp) -> Node:
    if not _recording or not any(p.parents or p.op == "leaf" for p in parents):
        node = Node(value, op=op)
    else:
        node = Node(value, parents, vjp, op)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op, node.id)
    return node


# -- broadcasting -------------------------------------------------------------


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) == 1 and len(b) >= 2 and a[0] == b[-1]:
        return b
    if len(b) == 1 and len(a) >= 2 and b[0] == a[-1]:
        return a
    raise ShapeError(op, f"cannot broadcast {a} with {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape(-1, shape[0]).sum(axis=0)


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record(
        "add",
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record(
        "sub",
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _record(
        "mul",
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("div", a.shape, b.shape)
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return _record(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * out / bv, bv.shape),
        ),
    )


def neg(a) -> Node:
    a = as_node(a)
    return _record("neg", -a.value, (a,), lambda g: (-g,))


def exp(a) -> Node:
    a = as_node(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = as_node(a)
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _record("log", out, (a,), lambda g: (g / av,))


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    return _record("square", av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a) -> Node:
    a = as_node(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.value)
    return _record("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def clamp_min(a, lower: float) -> Node:
    """max(a, lower); the gradient is zero wherever the clamp is active."""
    a = as_node(a)
    mask = a.value > lower
    return _record("clamp_min", np.where(mask, a.value, lower), (a,), lambda g: (g * mask,))


# -- reductions and shape manipulation ---------------------------------------


def sum(a, axis: int | None = None) -> Node:  # noqa: A001
    a = as_node(a)
    shape = a.shape
    if axis is None:
        return _record("sum", np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))
    axis = axis % a.ndim

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _record("sum", a.value.sum(axis=axis), (a,), vjp)


def mean(a, axis: int | None = None) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else a.shape[axis]
    return div(sum(a, axis), float(count))


def reshape(a, shape: Sequence[int]) -> Node:
    a = as_node(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", str(exc)) from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def slice_axis(a, start: int, stop: int, axis: int = 0) -> Node:
    """``a[start:stop]`` along ``axis``."""
    a = as_node(a)
    axis = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ShapeError("slice", f"[{start}:{stop}] out of range for axis {axis} of {a.shape}")
    index = (slice(None),) * axis + (slice(start, stop),)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _record("slice", a.value[index], (a,), vjp)


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = tuple(as_node(n) for n in nodes)
    if not nodes:
        raise ShapeError("concat", "nothing to concatenate")
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", str(exc)) from None
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return _record("concat", out, nodes, lambda g: tuple(np.split(g, bounds, axis=axis)))


# -- linear algebra -----------------------------------------------------------


def _require_matrix(op: str, *nodes: Node) -> None:
    for n in nodes:
        if n.ndim != 2:
            raise ShapeError(op, f"expected a matrix, got shape {n.shape}")


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _require_matrix("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> Node:
    a = as_node(a)
    _require_matrix("transpose", a)
    return _record("transpose", a.value.T, (a,), lambda g: (g.T,))


def diag_part(a) -> Node:
    a = as_node(a)
    _require_matrix("diag_part", a)
    n = min(a.shape)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[np.arange(n), np.arange(n)] = g
        return (full,)

    return _record("diag_part", np.diagonal(a.value).copy(), (a,), vjp)


def trace(a) -> Node:
    a = as_node(a)
    _require_matrix("trace", a)
    if a.shape[0] != a.shape[1]:
        raise ShapeError("trace", f"matrix is not square: {a.shape}")
    eye = np.eye(a.shape[0])
    return _record("trace", np.asarray(np.trace(a.value)), (a,), lambda g: (g * eye,))


def _phi(x: np.ndarray) -> np.ndarray:
    out = np.tril(x)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky(a) -> Node:
    """Lower Cholesky factor; the input adjoint is returned symmetrised."""
    a = as_node(a)
    _require_matrix("cholesky", a)
    if a.shape[0] != a.shape[1]:
        raise ShapeError("cholesky", f"matrix is not square: {a.shape}")
    try:
        chol = np.linalg.cholesky(a.value)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(f"cholesky: matrix of shape {a.shape} is not positive definite") from None

    def vjp(g):
        p = _phi(chol.T @ g)
        tmp = scipy.linalg.solve_triangular(chol, p, trans="T", lower=True)
        s = scipy.linalg.solve_triangular(chol, tmp.T, trans="T", lower=True)
        return (0.5 * (s + s.T),)

    return _record("cholesky", chol, (a,), vjp)


def solve_triangular(a, b, lower: bool = True) -> Node:
    """Solve ``a @ x = b`` for triangular ``a``; entries outside the triangle are ignored."""
    a, b = as_node(a), as_node(b)
    _require_matrix("solve_triangular", a, b)
    if a.shape[0] != a.shape[1] or a.shape[1] != b.shape[0]:
        raise ShapeError("solve_triangular", f"incompatible shapes {a.shape} and {b.shape}")
    av = a.value
    x = scipy.linalg.solve_triangular(av, b.value, lower=lower, check_finite=False)
    mask = np.tril if lower else np.triu

    def vjp(g):
        gb = scipy.linalg.solve_triangular(av, g, trans="T", lower=lower, check_finite=False)
        return (-mask(gb @ x.T), gb)

    return _record("solve_triangular", x, (a, b), vjp)


# -- driving the tape ---------------------------------------------------------


def forward(fn: Callable[[dict], Node], bindings: Mapping[str, np.ndarray]) -> tuple[Node, dict]:
    """Bind named leaves, run ``fn`` on them and return (root, leaves)."""
    leaves = {name: variable(value, name) for name, value in bindings.items()}
    root = as_node(fn(leaves))
    return root, leaves


def _toposort(root: Node) -> list[Node]:
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        stack.extend(node.parents)
    # Parents are always created before their children.
    return [seen[k] for k in sorted(seen, reverse=True)]


def backward(root: Node, leaves: Mapping[str, Node] | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``root`` with respect to leaves.

    With ``leaves`` given, every entry gets a gradient (zeros when the leaf
    does not influence the root); otherwise every named leaf reached from the
    root is reported.
    """
    if root.value.size != 1:
        raise ShapeError("backward", f"root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    adjoint = {root.id: np.ones_like(root.value)}
    for node in order:
        g = adjoint.pop(node.id, None) if node.parents else adjoint.get(node.id)
        if g is None or not node.parents:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not (parent.parents or parent.op == "leaf"):
                continue
            if parent.id in adjoint:
                adjoint[parent.id] = adjoint[parent.id] + pg
            else:
                adjoint[parent.id] = np.array(pg, dtype=np.float64)
    if leaves is None:
        return {n.name: adjoint.get(n.id, np.zeros_like(n.value)) for n in order if n.op == "leaf" and n.name}
    return {name: np.asarray(adjoint.get(n.id, np.zeros_like(n.value))).reshape(n.shape) for name, n in leaves.items()}


def grad(fn: Callable[[dict], Node], bindings: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Value and gradient of ``fn`` at ``bindings``."""
    root, leaves = forward(fn, bindings)
    return float(root.value), backward(root, leaves)
