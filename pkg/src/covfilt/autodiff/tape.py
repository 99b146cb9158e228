"""Linear reverse-mode tape over dense float64 matrices.

Every value on a tape is a 2-D float64 array. Scalars are 1x1 and vectors are
columns. Operations evaluate eagerly and register a vector-Jacobian product
that ``backward`` replays in reverse recording order.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from covfilt.exceptions import NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

__all__ = [
    "Array",
    "Node",
    "Tape",
    "add",
    "as_matrix",
    "backward",
    "const_",
    "detach",
    "exp",
    "hadamard",
    "ln",
    "matmul",
    "param",
    "scale",
    "scatter",
    "sub",
    "sum_",
    "take",
    "tanh",
    "transpose",
]

type Array = NDArray[np.float64]
type Operand = Node | float | ArrayLike
type Vjp = Callable[[Array], tuple[Array | None, ...]]


def as_matrix(value: ArrayLike) -> Array:
    """Coerce a scalar, vector or matrix to a 2-D float64 array (vectors become columns)."""
    array = np.array(value, dtype=np.float64)
    if array.ndim == 0:
        return array.reshape(1, 1)
    if array.ndim == 1:
        return array.reshape(-1, 1)
    if array.ndim == 2:
        return array
    msg = f"Expected at most 2 dimensions, got shape {array.shape}"
    raise ShapeError(msg)


@dataclass(eq=False)
class Node:
    """One recorded value and its adjoint."""

    tape: Tape
    id: int
    op: str
    parents: tuple[Node, ...]
    value: Array
    requires_grad: bool
    is_param: bool = False
    adjoint: Array = field(init=False)
    vjp: Vjp | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.adjoint = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        rows, cols = self.value.shape
        return rows, cols

    @property
    def T(self) -> Node:
        return transpose(self)

    def item(self) -> float:
        """Return the value of a 1x1 node as a Python float."""
        if self.value.shape != (1, 1):
            msg = f"item() needs a 1x1 node, got {self.value.shape}"
            raise ShapeError(msg)
        return float(self.value[0, 0])

    def _lift(self, other: Operand) -> Node:
        if isinstance(other, Node):
            return other
        return self.tape.const(other)

    def __add__(self, other: Operand) -> Node:
        return add(self, self._lift(other))

    def __radd__(self, other: Operand) -> Node:
        return add(self._lift(other), self)

    def __sub__(self, other: Operand) -> Node:
        return sub(self, self._lift(other))

    def __rsub__(self, other: Operand) -> Node:
        return sub(self._lift(other), self)

    def __neg__(self) -> Node:
        return scale(self, -1.0)

    def __matmul__(self, other: Operand) -> Node:
        return matmul(self, self._lift(other))

    def __rmatmul__(self, other: Operand) -> Node:
        return matmul(self._lift(other), self)

    def __mul__(self, other: Operand) -> Node:
        if isinstance(other, int | float):
            return scale(self, float(other))
        return hadamard(self, self._lift(other))

    def __rmul__(self, other: Operand) -> Node:
        return self.__mul__(other)


class Tape:
    """Ordered record of nodes; parents always precede their children.

    A tape is single-owner: build it, run ``backward`` once, read adjoints.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.next_id = 0
        self.backward_done = False

    def __len__(self) -> int:
        return len(self.nodes)

    def _leaf(self, value: ArrayLike, *, op: str, is_param: bool) -> Node:
        matrix = as_matrix(value).copy()
        if not np.all(np.isfinite(matrix)):
            msg = f"{op} value must be finite"
            raise NonFiniteError(msg)
        return self._append(op, (), matrix, requires_grad=is_param, is_param=is_param, vjp=None)

    def param(self, value: ArrayLike) -> Node:
        """Record a differentiable leaf whose adjoint is accumulated by ``backward``."""
        return self._leaf(value, op="param", is_param=True)

    def const(self, value: ArrayLike) -> Node:
        """Record a leaf that never receives gradient."""
        return self._leaf(value, op="const", is_param=False)

    def record(self, op: str, parents: Sequence[Node], value: Array, vjp: Vjp) -> Node:
        """Append an operation result; the VJP is dropped when no parent needs gradient."""
        for parent in parents:
            if parent.tape is not self:
                msg = f"Operand of '{op}' belongs to a different tape"
                raise TapeError(msg)
        requires_grad = any(parent.requires_grad for parent in parents)
        return self._append(op, tuple(parents), value, requires_grad=requires_grad, is_param=False, vjp=vjp)

    def _append(
        self,
        op: str,
        parents: tuple[Node, ...],
        value: Array,
        *,
        requires_grad: bool,
        is_param: bool,
        vjp: Vjp | None,
    ) -> Node:
        node = Node(
            tape=self,
            id=self.next_id,
            op=op,
            parents=parents,
            value=value,
            requires_grad=requires_grad,
            is_param=is_param,
            vjp=vjp if requires_grad else None,
        )
        self.nodes.append(node)
        self.next_id += 1
        return node

    def params(self) -> list[Node]:
        """Return all param leaves in recording order."""
        return [node for node in self.nodes if node.is_param]

    def zero_grad(self) -> None:
        """Clear every adjoint and allow another ``backward``."""
        for node in self.nodes:
            node.adjoint.fill(0.0)
        self.backward_done = False


def param(tape: Tape, value: ArrayLike) -> Node:
    """Record a differentiable leaf on ``tape``."""
    return tape.param(value)


def const_(tape: Tape, value: ArrayLike) -> Node:
    """Record a constant leaf on ``tape``."""
    return tape.const(value)


def detach(node: Node) -> Node:
    """Copy a node's current value into a fresh constant, cutting gradient flow."""
    return node.tape.const(node.value)


def _is_scalar(node: Node) -> bool:
    return node.shape == (1, 1)


def _reduce_to(grad: Array, shape: tuple[int, int]) -> Array:
    if grad.shape == shape:
        return grad
    return np.array([[grad.sum()]])


def _broadcast_shapes(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        msg = f"{op}: shape mismatch {a.shape} vs {b.shape}"
        raise ShapeError(msg)


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; a 1x1 operand is broadcast."""
    _broadcast_shapes("add", a, b)
    return a.tape.record(
        "add",
        (a, b),
        a.value + b.value,
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
    )


def sub(a: Node, b: Node) -> Node:
    """Elementwise difference; a 1x1 operand is broadcast."""
    _broadcast_shapes("sub", a, b)
    return a.tape.record(
        "sub",
        (a, b),
        a.value - b.value,
        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)),
    )


def matmul(a: Node, b: Node) -> Node:
    """Matrix product."""
    if a.shape[1] != b.shape[0]:
        msg = f"matmul: inner dimensions differ {a.shape} @ {b.shape}"
        raise ShapeError(msg)
    return a.tape.record(
        "matmul",
        (a, b),
        a.value @ b.value,
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def transpose(a: Node) -> Node:
    return a.tape.record("transpose", (a,), a.value.T.copy(), lambda g: (g.T,))


def scale(a: Node, factor: float) -> Node:
    """Multiply by a Python scalar."""
    return a.tape.record("scale", (a,), a.value * factor, lambda g: (g * factor,))


def hadamard(a: Node, b: Node) -> Node:
    """Elementwise product; a 1x1 operand is broadcast."""
    _broadcast_shapes("hadamard", a, b)
    return a.tape.record(
        "hadamard",
        (a, b),
        a.value * b.value,
        lambda g: (_reduce_to(g * b.value, a.shape), _reduce_to(g * a.value, b.shape)),
    )


def sum_(a: Node) -> Node:
    """Sum of all entries as a 1x1 node."""
    return a.tape.record(
        "sum",
        (a,),
        np.array([[a.value.sum()]]),
        lambda g: (np.full(a.shape, g[0, 0]),),
    )


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.tape.record("exp", (a,), out, lambda g: (g * out,))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return a.tape.record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def ln(a: Node) -> Node:
    """Elementwise natural logarithm of strictly positive entries."""
    if np.any(a.value <= 0.0):
        msg = "ln: argument must be strictly positive"
        raise NonFiniteError(msg)
    return a.tape.record("ln", (a,), np.log(a.value), lambda g: (g / a.value,))


def take(a: Node, rows: Sequence[int], cols: Sequence[int]) -> Node:
    """Gather the sub-matrix ``a[rows][:, cols]``."""
    index = np.ix_(np.asarray(rows, dtype=np.intp), np.asarray(cols, dtype=np.intp))

    def vjp(g: Array) -> tuple[Array]:
        grad = np.zeros_like(a.value)
        np.add.at(grad, index, g)
        return (grad,)

    return a.tape.record("take", (a,), a.value[index].copy(), vjp)


def scatter(a: Node, shape: tuple[int, int], rows: Sequence[int], cols: Sequence[int]) -> Node:
    """Place the entries of ``a`` (row-major order) at ``(rows[i], cols[i])`` of a zero matrix."""
    row_index = np.asarray(rows, dtype=np.intp)
    col_index = np.asarray(cols, dtype=np.intp)
    if row_index.shape != col_index.shape or row_index.size != a.value.size:
        msg = f"scatter: {a.value.size} values for {row_index.size} positions"
        raise ShapeError(msg)
    out = np.zeros(shape)
    np.add.at(out, (row_index, col_index), a.value.ravel())
    return a.tape.record(
        "scatter",
        (a,),
        out,
        lambda g: (g[row_index, col_index].reshape(a.shape),),
    )


def backward(tape: Tape, root: Node, *, accumulate: bool = False) -> int:
    """Propagate d(root)/d(node) into every adjoint on the tape.

    Args:
        tape: Tape that recorded ``root``.
        root: 1x1 node to differentiate.
        accumulate: Add to param adjoints left by an earlier pass instead of
            refusing to run twice.

    Returns:
        Number of nodes visited (every node recorded up to and including ``root``).

    Raises:
        TapeError: If ``root`` is not scalar, belongs to another tape, or the
            tape already ran backward and ``accumulate`` is False.
    """
    if root.tape is not tape:
        msg = "backward root belongs to a different tape"
        raise TapeError(msg)
    if root.shape != (1, 1):
        msg = f"backward root must be 1x1, got {root.shape}"
        raise TapeError(msg)
    if tape.backward_done and not accumulate:
        msg = "tape already ran backward; call zero_grad() or pass accumulate=True"
        raise TapeError(msg)

    for node in tape.nodes:
        if not node.is_param:
            node.adjoint.fill(0.0)
    root.adjoint += 1.0

    visits = 0
    for node in reversed(tape.nodes[: root.id + 1]):
        visits += 1
        if node.vjp is None or not node.adjoint.any():
            continue
        grads = node.vjp(node.adjoint)
        for parent, grad in zip(node.parents, grads, strict=True):
            if grad is not None and parent.requires_grad:
                parent.adjoint += grad

    tape.backward_done = True
    logger.debug("backward visited %d nodes", visits)
    return visits
