"""Reverse-mode differentiation over the small, closed set of graphs used by dg3d.

Graphs are built eagerly: every op returns a :class:`Node` holding its value and,
for each parent that leads back to a trainable :class:`ParamBuffer`, a
vector-Jacobian product. Parents that cannot reach a trainable buffer are
dropped at construction, so graphs over frozen parameters cost nothing.

>>> x = ParamBuffer("x", np.array(3.0))
>>> backward(square(leaf(x)))
>>> float(x.grad)
6.0
"""

from __future__ import annotations

import dataclasses
import itertools
from typing import (
    Callable,
    Iterable,
    Mapping,
    Optional,
    Sequence,
    Union,
    cast,
)

import numpy as np
import numpy.typing as npt

from .errors import GraphError, NonFiniteError

Array = npt.NDArray[np.float64]
Vjp = Callable[[Array], Array]
Operand = Union["Node", Array, float, int]

_ids = itertools.count()


@dataclasses.dataclass(eq=False)
class ParamBuffer:
    name: str
    values: Array
    trainable: bool = True
    grad: Array = dataclasses.field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.values = np.array(self.values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return cast(tuple[int, ...], self.values.shape)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def copy(self, trainable: Optional[bool] = None) -> ParamBuffer:
        return ParamBuffer(
            self.name,
            self.values.copy(),
            self.trainable if trainable is None else trainable,
        )

    def __str__(self) -> str:
        return f"ParamBuffer {self.name} {self.shape}"


class Node:
    __array_priority__ = 1000

    def __init__(
        self,
        value: npt.ArrayLike,
        parents: Sequence[tuple[Node, Vjp]] = (),
        op: str = "const",
        param: Optional[ParamBuffer] = None,
    ) -> None:
        self.value: Array = np.asarray(value, dtype=np.float64)
        self.parents = tuple(
            (parent, vjp) for parent, vjp in parents if parent.requires_grad
        )
        self.op = op
        self.param = param
        self.requires_grad = bool(self.parents) or (
            param is not None and param.trainable
        )
        self.ident = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return cast(tuple[int, ...], self.value.shape)

    def __repr__(self) -> str:
        name = f" {self.param.name}" if self.param is not None else ""
        return f"<Node #{self.ident} {self.op}{name} {self.shape}>"

    def __add__(self, other: Operand) -> Node:
        return add(self, other)

    def __radd__(self, other: Operand) -> Node:
        return add(other, self)

    def __sub__(self, other: Operand) -> Node:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> Node:
        return sub(other, self)

    def __mul__(self, other: Operand) -> Node:
        return mul(self, other)

    def __rmul__(self, other: Operand) -> Node:
        return mul(other, self)

    def __truediv__(self, other: Operand) -> Node:
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> Node:
        return div(other, self)

    def __neg__(self) -> Node:
        return neg(self)

    def __matmul__(self, other: Operand) -> Node:
        return matmul(self, other)

    def __rmatmul__(self, other: Operand) -> Node:
        return matmul(other, self)

    def __getitem__(self, index: object) -> Node:
        return getitem(self, index)

    def __pow__(self, exponent: float) -> Node:
        return power(self, exponent)

    def sum(self, axis: Optional[Union[int, tuple[int, ...]]] = None) -> Node:
        return sum_(self, axis)

    def mean(self, axis: Optional[Union[int, tuple[int, ...]]] = None) -> Node:
        return mean(self, axis)

    def reshape(self, *shape: int) -> Node:
        return reshape(self, shape)


def leaf(buffer: ParamBuffer) -> Node:
    return Node(buffer.values, op="param", param=buffer)


def const(value: npt.ArrayLike) -> Node:
    return Node(value)


def as_node(value: Operand) -> Node:
    return value if isinstance(value, Node) else const(value)


def detach(value: Operand) -> Node:
    return const(as_node(value).value)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Operand, b: Operand) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(
        a.value + b.value,
        [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ],
        "add",
    )


def sub(a: Operand, b: Operand) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(
        a.value - b.value,
        [
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(-g, b.shape)),
        ],
        "sub",
    )


def mul(a: Operand, b: Operand) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(
        a.value * b.value,
        [
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ],
        "mul",
    )


def div(a: Operand, b: Operand) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(
        a.value / b.value,
        [
            (a, lambda g: _unbroadcast(g / b.value, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.value / b.value**2, b.shape)),
        ],
        "div",
    )


def neg(a: Operand) -> Node:
    a = as_node(a)
    return Node(-a.value, [(a, lambda g: -g)], "neg")


def power(a: Operand, exponent: float) -> Node:
    a = as_node(a)
    return Node(
        a.value**exponent,
        [(a, lambda g: g * exponent * a.value ** (exponent - 1))],
        "power",
    )


def matmul(a: Operand, b: Operand) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim not in (1, 2) or b.value.ndim not in (1, 2):
        raise GraphError(f"matmul supports 1-D and 2-D operands, got {a!r} @ {b!r}")
    av, bv = a.value, b.value

    def grad_a(g: Array) -> Array:
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T
        if av.ndim == 2:
            return np.outer(g, bv)
        if bv.ndim == 2:
            return bv @ g
        return g * bv

    def grad_b(g: Array) -> Array:
        if av.ndim == 2 and bv.ndim == 2:
            return av.T @ g
        if av.ndim == 2:
            return av.T @ g
        if bv.ndim == 2:
            return np.outer(av, g)
        return g * av

    return Node(av @ bv, [(a, grad_a), (b, grad_b)], "matmul")


def sum_(a: Operand, axis: Optional[Union[int, tuple[int, ...]]] = None) -> Node:
    a = as_node(a)
    shape = a.shape

    def vjp(g: Array) -> Array:
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Node(np.sum(a.value, axis=axis), [(a, vjp)], "sum")


def mean(a: Operand, axis: Optional[Union[int, tuple[int, ...]]] = None) -> Node:
    a = as_node(a)
    total = sum_(a, axis)
    count = a.value.size // max(total.value.size, 1)
    return total * (1.0 / count)


def reshape(a: Operand, shape: Sequence[int]) -> Node:
    a = as_node(a)
    original = a.shape
    return Node(a.value.reshape(shape), [(a, lambda g: g.reshape(original))], "reshape")


def transpose(a: Operand, axes: Sequence[int]) -> Node:
    a = as_node(a)
    inverse = np.argsort(axes)
    return Node(
        np.transpose(a.value, axes),
        [(a, lambda g: np.transpose(g, inverse))],
        "transpose",
    )


def getitem(a: Operand, index: object) -> Node:
    a = as_node(a)

    def vjp(g: Array) -> Array:
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)  # type: ignore[arg-type]
        return out

    return Node(a.value[index], [(a, vjp)], "getitem")  # type: ignore[index]


def concat(parts: Sequence[Operand], axis: int = 0) -> Node:
    nodes = [as_node(part) for part in parts]
    bounds = np.cumsum([0] + [node.shape[axis] for node in nodes])

    def make_vjp(start: int, stop: int) -> Vjp:
        def vjp(g: Array) -> Array:
            return np.take(g, np.arange(start, stop), axis=axis)

        return vjp

    return Node(
        np.concatenate([node.value for node in nodes], axis=axis),
        [
            (node, make_vjp(int(bounds[i]), int(bounds[i + 1])))
            for i, node in enumerate(nodes)
        ],
        "concat",
    )


def stack(parts: Sequence[Operand], axis: int = 0) -> Node:
    nodes = [as_node(part) for part in parts]

    def make_vjp(i: int) -> Vjp:
        def vjp(g: Array) -> Array:
            return np.take(g, i, axis=axis)

        return vjp

    return Node(
        np.stack([node.value for node in nodes], axis=axis),
        [(node, make_vjp(i)) for i, node in enumerate(nodes)],
        "stack",
    )


def exp(a: Operand) -> Node:
    a = as_node(a)
    value = np.exp(a.value)
    return Node(value, [(a, lambda g: g * value)], "exp")


def sin(a: Operand) -> Node:
    a = as_node(a)
    return Node(np.sin(a.value), [(a, lambda g: g * np.cos(a.value))], "sin")


def cos(a: Operand) -> Node:
    a = as_node(a)
    return Node(np.cos(a.value), [(a, lambda g: -g * np.sin(a.value))], "cos")


def sqrt(a: Operand) -> Node:
    a = as_node(a)
    value = np.sqrt(a.value)
    return Node(value, [(a, lambda g: g * 0.5 / value)], "sqrt")


def square(a: Operand) -> Node:
    a = as_node(a)
    return Node(a.value**2, [(a, lambda g: 2.0 * g * a.value)], "square")


def absolute(a: Operand) -> Node:
    a = as_node(a)
    return Node(np.abs(a.value), [(a, lambda g: g * np.sign(a.value))], "abs")


def _sigmoid(x: Array) -> Array:
    out: Array = np.exp(-np.logaddexp(0.0, -x))
    return out


def sigmoid(a: Operand) -> Node:
    a = as_node(a)
    value = _sigmoid(a.value)
    return Node(value, [(a, lambda g: g * value * (1.0 - value))], "sigmoid")


def softplus(a: Operand) -> Node:
    a = as_node(a)
    return Node(
        np.logaddexp(0.0, a.value), [(a, lambda g: g * _sigmoid(a.value))], "softplus"
    )


def leaky_relu(a: Operand, slope: float) -> Node:
    a = as_node(a)
    scale = np.where(a.value > 0, 1.0, slope)
    return Node(a.value * scale, [(a, lambda g: g * scale)], "leaky_relu")


def cumsum(a: Operand, axis: int) -> Node:
    a = as_node(a)

    def vjp(g: Array) -> Array:
        return np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)

    return Node(np.cumsum(a.value, axis=axis), [(a, vjp)], "cumsum")


def separable_linear(x: Operand, left: Array, right: Array, axes: tuple[int, int] = (-2, -1)) -> Node:
    """Apply ``left @ X @ right.T`` to the 2-D slices of ``x`` spanned by ``axes``.

    Resampling (bilinear upsampling, box pooling, resizing) of images and
    triplanes goes through here.
    """
    x = as_node(x)
    moved = np.moveaxis(x.value, axes, (-2, -1))
    out = np.einsum("ia,...ab,jb->...ij", left, moved, right)

    def vjp(g: Array) -> Array:
        g_moved = np.moveaxis(g, axes, (-2, -1))
        back = np.einsum("ia,...ij,jb->...ab", left, g_moved, right)
        return np.moveaxis(back, (-2, -1), axes)

    return Node(np.moveaxis(out, (-2, -1), axes), [(x, vjp)], "separable_linear")


def interpolation_matrix(size_in: int, size_out: int) -> Array:
    """Bilinear resampling with aligned corners.

    >>> interpolation_matrix(2, 3).tolist()
    [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]]
    """
    matrix = np.zeros((size_out, size_in))
    if size_in == 1:
        matrix[:, 0] = 1.0
        return matrix
    if size_out == 1:
        matrix[0, :] = 1.0 / size_in
        return matrix
    position = np.linspace(0.0, size_in - 1, size_out)
    lower = np.clip(np.floor(position).astype(int), 0, size_in - 2)
    frac = position - lower
    rows = np.arange(size_out)
    matrix[rows, lower] += 1.0 - frac
    matrix[rows, lower + 1] += frac
    return matrix


def pooling_matrix(size_in: int, size_out: int) -> Array:
    """Box average over ``size_in // size_out`` consecutive entries."""
    if size_in % size_out:
        raise ValueError(f"cannot pool {size_in} into {size_out}")
    factor = size_in // size_out
    matrix = np.zeros((size_out, size_in))
    for row in range(size_out):
        matrix[row, row * factor : (row + 1) * factor] = 1.0 / factor
    return matrix


def grid_sample(plane: Operand, uv: Operand) -> Node:
    """Bilinear lookup of a (C, R, R) plane at (N, 2) coordinates in [-1, 1].

    ``uv[:, 0]`` indexes columns and ``uv[:, 1]`` rows; corners are aligned
    with the outermost texels. Coordinates outside [-1, 1] read zero and
    receive no gradient.
    """
    plane, uv = as_node(plane), as_node(uv)
    values = plane.value
    channels, rows, cols = values.shape
    if rows < 2 or cols < 2:
        raise GraphError(f"grid_sample needs at least 2x2 planes, got {plane!r}")
    coords = uv.value
    inside = np.all(np.abs(coords) <= 1.0, axis=-1)
    col = (np.clip(coords[:, 0], -1.0, 1.0) + 1.0) * 0.5 * (cols - 1)
    row = (np.clip(coords[:, 1], -1.0, 1.0) + 1.0) * 0.5 * (rows - 1)
    c0 = np.clip(np.floor(col).astype(int), 0, cols - 2)
    r0 = np.clip(np.floor(row).astype(int), 0, rows - 2)
    fc = col - c0
    fr = row - r0
    mask = inside.astype(np.float64)
    w00 = (1 - fr) * (1 - fc) * mask
    w01 = (1 - fr) * fc * mask
    w10 = fr * (1 - fc) * mask
    w11 = fr * fc * mask
    p00 = values[:, r0, c0]
    p01 = values[:, r0, c0 + 1]
    p10 = values[:, r0 + 1, c0]
    p11 = values[:, r0 + 1, c0 + 1]
    out = (w00 * p00 + w01 * p01 + w10 * p10 + w11 * p11).T

    def grad_plane(g: Array) -> Array:
        flat_index = np.concatenate(
            [r0 * cols + c0, r0 * cols + c0 + 1, (r0 + 1) * cols + c0, (r0 + 1) * cols + c0 + 1]
        )
        contrib = np.tile(g, (4, 1)) * np.concatenate([w00, w01, w10, w11])[:, None]
        return np.stack(
            [
                np.bincount(flat_index, weights=contrib[:, ch], minlength=rows * cols)
                for ch in range(channels)
            ]
        ).reshape(channels, rows, cols)

    def grad_uv(g: Array) -> Array:
        d_col = (1 - fr) * (p01 - p00) + fr * (p11 - p10)
        d_row = (1 - fc) * (p10 - p00) + fc * (p11 - p01)
        result = np.zeros_like(coords)
        result[:, 0] = np.sum(g.T * d_col, axis=0) * 0.5 * (cols - 1) * mask
        result[:, 1] = np.sum(g.T * d_row, axis=0) * 0.5 * (rows - 1) * mask
        return result

    return Node(out, [(plane, grad_plane), (uv, grad_uv)], "grid_sample")


def weighted_gather(table: Operand, index: npt.NDArray[np.int64], weights: Array) -> Node:
    """``out[n] = sum_k weights[n, k] * table[index[n, k]]`` for a (M, C) table."""
    table = as_node(table)
    out = np.einsum("nk,nkc->nc", weights, table.value[index])

    def vjp(g: Array) -> Array:
        rows, channels = table.shape
        contrib = (weights[:, :, None] * g[:, None, :]).reshape(-1, channels)
        flat_index = index.reshape(-1)
        return np.stack(
            [
                np.bincount(flat_index, weights=contrib[:, ch], minlength=rows)
                for ch in range(channels)
            ],
            axis=1,
        )

    return Node(out, [(table, vjp)], "weighted_gather")


def custom_grad(x: Operand, grad: Array) -> Node:
    """Scalar 0.0 whose gradient with respect to ``x`` is ``grad``.

    Lets an externally computed gradient (such as a score-distillation
    residual) enter a loss as an ordinary summand.
    """
    x = as_node(x)
    if grad.shape != x.shape:
        raise GraphError(f"custom gradient of shape {grad.shape} for {x!r}", x)
    return Node(0.0, [(x, lambda g: g * grad)], "custom_grad")


def _topological_order(output: Node) -> list[Node]:
    order: list[Node] = []
    state: dict[int, int] = {}
    stack: list[tuple[Node, int]] = [(output, 0)]
    while stack:
        node, cursor = stack.pop()
        if cursor == 0:
            if state.get(node.ident) == 2:
                continue
            state[node.ident] = 1
        if cursor < len(node.parents):
            stack.append((node, cursor + 1))
            parent = node.parents[cursor][0]
            mark = state.get(parent.ident)
            if mark == 1:
                raise GraphError(f"cycle through {parent!r}", parent)
            if mark is None:
                stack.append((parent, 0))
        else:
            state[node.ident] = 2
            order.append(node)
    return order


def backward(output: Node, params: Optional[Iterable[ParamBuffer]] = None) -> None:
    """Accumulate d(output)/d(buffer) into the grad of trainable buffers.

    When ``params`` is given, only those buffers receive gradients.
    """
    if output.value.size != 1:
        raise GraphError(f"backward needs a scalar output, got {output!r}", output)
    selected = None if params is None else {id(buffer) for buffer in params}
    grads: dict[int, Array] = {output.ident: np.ones_like(output.value)}
    for node in reversed(_topological_order(output)):
        grad = grads.pop(node.ident, None)
        if grad is None:
            continue
        buffer = node.param
        if (
            buffer is not None
            and buffer.trainable
            and (selected is None or id(buffer) in selected)
        ):
            if grad.shape != buffer.shape:
                raise GraphError(
                    f"gradient of shape {grad.shape} for {buffer} at {node!r}", node
                )
            buffer.grad += grad
        for parent, vjp in node.parents:
            parent_grad = np.asarray(vjp(grad), dtype=np.float64)
            if parent_grad.shape != parent.shape:
                raise GraphError(
                    f"{node!r} sent gradient of shape {parent_grad.shape} to {parent!r}",
                    parent,
                )
            if parent.ident in grads:
                grads[parent.ident] = grads[parent.ident] + parent_grad
            else:
                grads[parent.ident] = parent_grad


@dataclasses.dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, Array] = dataclasses.field(default_factory=dict)
    second_moment: dict[str, Array] = dataclasses.field(default_factory=dict)


def adam_step(state: OptimizerState, params: Iterable[ParamBuffer]) -> None:
    """One bias-corrected Adam update of the trainable buffers, then zero all grads."""
    buffers = list(params)
    trainable = [buffer for buffer in buffers if buffer.trainable]
    for buffer in trainable:
        bad = ~np.isfinite(buffer.grad)
        if bad.any():
            index = tuple(int(i) for i in np.argwhere(bad)[0])
            raise NonFiniteError(
                f"non-finite gradient in {buffer.name} at index {index}",
                f"{buffer.name}{list(index)}",
            )
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for buffer in trainable:
        first = state.first_moment.get(buffer.name)
        second = state.second_moment.get(buffer.name)
        if first is None or first.shape != buffer.shape:
            first = np.zeros_like(buffer.values)
        if second is None or second.shape != buffer.shape:
            second = np.zeros_like(buffer.values)
        first = state.beta1 * first + (1.0 - state.beta1) * buffer.grad
        second = state.beta2 * second + (1.0 - state.beta2) * buffer.grad**2
        state.first_moment[buffer.name] = first
        state.second_moment[buffer.name] = second
        buffer.values -= (
            state.lr * (first / correction1) / (np.sqrt(second / correction2) + state.eps)
        )
    for buffer in buffers:
        buffer.zero_grad()


@dataclasses.dataclass(frozen=True)
class FdReport:
    max_error: float
    worst_index: tuple[int, ...]
    analytic: Array
    numeric: Array


def fd_report(
    op: Callable[[ParamBuffer], Node], point: ParamBuffer, h: float = 1e-5
) -> FdReport:
    if not point.trainable:
        raise ValueError(f"{point} must be trainable to be checked")
    point.zero_grad()
    backward(op(point), [point])
    analytic = point.grad.copy()
    point.zero_grad()
    numeric = np.zeros_like(analytic)
    flat = point.values.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        plus = float(op(point).value)
        flat[i] = saved - h
        minus = float(op(point).value)
        flat[i] = saved
        if not (np.isfinite(plus) and np.isfinite(minus)):
            coordinate = tuple(int(c) for c in np.unravel_index(i, point.shape))
            raise NonFiniteError(
                f"{point.name} not finite at coordinate {coordinate}",
                f"{point.name}{list(coordinate)}",
            )
        numeric.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    errors = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    if errors.size == 0:
        return FdReport(0.0, (), analytic, numeric)
    worst = int(np.argmax(errors))
    return FdReport(
        float(errors.reshape(-1)[worst]),
        tuple(int(c) for c in np.unravel_index(worst, point.shape)),
        analytic,
        numeric,
    )


def fd_check(
    op: Callable[[ParamBuffer], Node], point: ParamBuffer, h: float = 1e-5
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    >>> fd_check(lambda b: square(leaf(b)).sum(), ParamBuffer("x", np.array([3.0]))) < 1e-6
    True
    """
    return fd_report(op, point, h).max_error


def buffers_by_name(buffers: Iterable[ParamBuffer]) -> Mapping[str, ParamBuffer]:
    return {buffer.name: buffer for buffer in buffers}
