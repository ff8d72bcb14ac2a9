"""Tape-based reverse-mode differentiation over dense 2-D float64 arrays.

A :class:`Node` wraps a 2-D ``numpy.ndarray`` (the library's ``Matrix``) and,
when it was produced by a differentiable operation, the parents and the local
adjoint rule of that operation.  Every public operation accepts plain arrays
or nodes; it returns a plain array when no argument is a node, and a node
otherwise.  ``backward(loss)`` walks the tape in reverse topological order and
accumulates gradients into leaf nodes that require them.
"""

from __future__ import annotations

import functools
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import DimensionError, DomainError, GraphError, NumericError, ParameterError
from .rng import RngState

Matrix = np.ndarray

_GRAD_ENABLED = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def matrix(data, *, check: bool = True) -> Matrix:
    """Coerce ``data`` into a C-contiguous 2-D float64 array."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    if check and not np.isfinite(arr).all():
        raise NumericError("matrix contains non-finite entries")
    return arr


class Node:
    """A value on the tape together with its gradient."""

    __slots__ = ("value", "_grad", "parents", "backward_rule", "requires_grad", "name")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_rule: Callable | None = None,
                 requires_grad: bool = False, name: str | None = None):
        self.value = value if isinstance(value, np.ndarray) and value.ndim == 2 else matrix(value)
        self._grad = None
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self.name = name

    @property
    def grad(self) -> Matrix:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Node{label} shape={self.value.shape} requires_grad={self.requires_grad}>"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def parameter(value, name: str | None = None) -> Node:
    """A trainable leaf."""
    return Node(matrix(value).copy(), requires_grad=True, name=name)


def as_value(x) -> Matrix:
    """The array behind a node, or the argument itself as a matrix."""
    return x.value if isinstance(x, Node) else matrix(x, check=False)


def constant(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def detach(x) -> Node:
    """Stop-gradient: same value, no tape connection."""
    return Node(x.value if isinstance(x, Node) else matrix(x))


def _make(value: Matrix, parents: tuple, rule: Callable) -> Node:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Node(value, parents, rule, requires_grad=True)
    return Node(value)


def differentiable(fn: Callable | None = None, *, tensors: int | None = None) -> Callable:
    """Lift array arguments to nodes; unwrap the result if no node came in.

    ``tensors`` is the number of leading positional arguments that are
    matrices (``None`` means all of them).
    """

    def decorate(fn: Callable) -> Callable:
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            n = len(args) if tensors is None else min(tensors, len(args))
            any_node = False
            lifted = list(args)
            for i in range(n):
                a = args[i]
                if isinstance(a, Node):
                    any_node = True
                else:
                    lifted[i] = Node(matrix(a, check=False))
            out = fn(*lifted, **kwargs)
            return out if any_node else out.value

        return wrapper

    return decorate(fn) if fn is not None else decorate


def _unbroadcast(g: Matrix, shape: tuple[int, int]) -> Matrix:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(a: tuple[int, int], b: tuple[int, int], op: str) -> None:
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: incompatible shapes {a} and {b}")


def _check_finite(value: Matrix, op: str) -> Matrix:
    if not np.isfinite(value).all():
        raise NumericError(f"{op} produced non-finite values")
    return value


@differentiable
def add(a: Node, b: Node) -> Node:
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


@differentiable
def sub(a: Node, b: Node) -> Node:
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


@differentiable
def hadamard(a: Node, b: Node) -> Node:
    _broadcast_shape(a.shape, b.shape, "hadamard")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


@differentiable(tensors=1)
def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,))


@differentiable
def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    av, bv = a.value, b.value
    need_a, need_b = a.requires_grad, b.requires_grad
    # skip the product for a constant operand (e.g. an input batch)
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T if need_a else None, av.T @ g if need_b else None))


@differentiable(tensors=1)
def transpose(a: Node) -> Node:
    return _make(np.ascontiguousarray(a.value.T), (a,), lambda g: (g.T,))


@differentiable(tensors=1)
def relu(a: Node) -> Node:
    mask = a.value > 0
    return _make(a.value * mask, (a,), lambda g: (g * mask,))


@differentiable(tensors=1)
def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    _check_finite(out, "exp")
    return _make(out, (a,), lambda g: (g * out,))


@differentiable(tensors=1)
def log(a: Node) -> Node:
    if (a.value <= 0).any():
        raise DomainError("log of a non-positive entry")
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,))


@differentiable(tensors=1)
def sigmoid(a: Node) -> Node:
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: Matrix) -> Matrix:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@differentiable(tensors=1)
def reduce_sum(a: Node, axis: int | None = None) -> Node:
    shape = a.shape
    if axis is None:
        out = np.array([[a.value.sum()]])
        return _make(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.value.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


@differentiable(tensors=1)
def reduce_mean(a: Node, axis: int | None = None) -> Node:
    n = a.value.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis=axis), 1.0 / n)


@differentiable(tensors=1)
def row_softmax(a: Node) -> Node:
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (a,), rule)


@differentiable(tensors=1)
def row_log_softmax(a: Node) -> Node:
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


@differentiable(tensors=1)
def l2_normalize_rows(a: Node, eps: float = 1e-12) -> Node:
    if eps <= 0:
        raise ParameterError("eps must be positive")
    norms = np.sqrt((a.value * a.value).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    out = a.value / denom
    small = norms < eps

    def rule(g):
        proj = (g * out).sum(axis=1, keepdims=True)
        grad = (g - out * np.where(small, 0.0, proj)) / denom
        return (grad,)

    return _make(out, (a,), rule)


@differentiable
def concat_rows(*parts: Node) -> Node:
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise DimensionError("concat_rows: column counts differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    out = np.concatenate([p.value for p in parts], axis=0)
    return _make(out, parts, lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts))))


@differentiable
def concat_cols(*parts: Node) -> Node:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError("concat_cols: row counts differ")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.value for p in parts], axis=1)
    return _make(out, parts, lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))))


@differentiable(tensors=1)
def gather_rows(a: Node, index) -> Node:
    """Rows ``a[index]``; the adjoint scatter-adds back into ``a``."""
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.value[index], (a,), rule)


@differentiable(tensors=1)
def slice_rows(a: Node, start: int, stop: int) -> Node:
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _make(a.value[start:stop], (a,), rule)


@differentiable(tensors=1)
def dropout(a: Node, rate: float, rng: RngState | None = None, training: bool = True) -> Node:
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ParameterError("training-mode dropout needs an rng")
    keep = (rng.uniform(a.shape) >= rate) / (1.0 - rate)
    return _make(a.value * keep, (a,), lambda g: (g * keep,))


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Node, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        key = id(node)
        if i == 0:
            s = state.get(key)
            if s == 2:
                continue
            if s == 1:
                raise GraphError("cycle detected in tape")
            state[key] = 1
        parents = [p for p in node.parents if p.requires_grad]
        if i < len(parents):
            stack.append((node, i + 1))
            child = parents[i]
            cs = state.get(id(child))
            if cs == 1:
                raise GraphError("cycle detected in tape")
            if cs is None:
                stack.append((child, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into every trainable leaf's ``grad``."""
    if loss.value.shape != (1, 1):
        raise DimensionError(f"backward needs a 1x1 loss, got {loss.value.shape}")
    if not loss.requires_grad:
        return
    adjoints: dict[int, Matrix] = {id(loss): np.ones((1, 1))}
    for node in reversed(_topological(loss)):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node.backward_rule is None:
            if node._grad is None:
                node._grad = np.array(g, dtype=np.float64, copy=True)
            else:
                node._grad += g
            continue
        node._grad = g
        for parent, pg in zip(node.parents, node.backward_rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = adjoints.get(key)
            adjoints[key] = pg if prev is None else prev + pg
