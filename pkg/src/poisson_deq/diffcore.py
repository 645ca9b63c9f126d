# MIT license
# Copyright 2022 Sergej Alikov <sergej.alikov@gmail.com>

"""
Dense float64 tensors with reverse-mode differentiation over a closed set of
operations.

Every adjoint rule is written with the same traced operations, so a
vector-Jacobian product computed with ``create_graph=True`` is itself a traced
expression and can be differentiated once more.
"""

import contextlib
import logging
import threading
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

_state = threading.local()


class DiffcoreError(Exception):
    pass


class ShapeMismatch(DiffcoreError):
    pass


class NonFiniteValue(DiffcoreError):
    pass


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(enabled: bool) -> Iterator[None]:
    previous = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = previous


def no_grad():
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


Backward = Callable[["Tensor", "Tensor"], tuple]


class Tensor:
    """
    A trace node: value, the op that produced it, its inputs and the adjoint
    rule mapping an upstream gradient to one gradient per input.
    """

    __slots__ = ("data", "requires_grad", "parents", "backward", "op")

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue("Tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple["Tensor", ...] = ()
        self.backward: Optional[Backward] = None
        self.op = "leaf"

    def __repr__(self) -> str:
        return (
            f"Tensor(op={self.op}, shape={self.shape}, "
            f"requires_grad={self.requires_grad})"
        )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(x: TensorLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(op: str, data: np.ndarray, parents: tuple, backward: Backward) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward = backward
        out.op = op
    return out


# Shape plumbing


def reshape(x: TensorLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    original = x.shape
    return _result(
        "reshape",
        x.data.reshape(shape),
        (x,),
        lambda g, out: (reshape(g, original),),
    )


def expand(x: TensorLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    original = x.shape
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeMismatch(f"Cannot expand {original} to {shape}")
    return _result("expand", data, (x,), lambda g, out: (sum_to(g, original),))


def sum_to(x: TensorLike, shape: Sequence[int]) -> Tensor:
    """
    Sum a broadcast result back down to ``shape``.
    """
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x

    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and x.shape[lead + i] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    data = data.reshape(shape)
    original = x.shape
    return _result("sum_to", data, (x,), lambda g, out: (expand(g, original),))


def transpose(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeMismatch(f"transpose needs a matrix, got shape {x.shape}")
    return _result("transpose", x.data.T.copy(), (x,), lambda g, out: (transpose(g),))


def slice_last(x: TensorLike, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    width = x.shape[-1]
    return _result(
        "slice_last",
        x.data[..., start:stop].copy(),
        (x,),
        lambda g, out: (pad_last(g, start, width),),
    )


def pad_last(x: TensorLike, start: int, width: int) -> Tensor:
    x = as_tensor(x)
    stop = start + x.shape[-1]
    data = np.zeros(x.shape[:-1] + (width,))
    data[..., start:stop] = x.data
    return _result("pad_last", data, (x,), lambda g, out: (slice_last(g, start, stop),))


def concat(tensors: Sequence[TensorLike]) -> Tensor:
    """
    Concatenate along the last axis.
    """
    parts = tuple(as_tensor(t) for t in tensors)
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeMismatch(
                f"concat needs matching leading shapes, got {[q.shape for q in parts]}"
            )

    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def backward(g, out):
        return tuple(
            slice_last(g, int(bounds[i]), int(bounds[i + 1])) for i in range(len(parts))
        )

    return _result(
        "concat", np.concatenate([p.data for p in parts], axis=-1), parts, backward
    )


def gather(x: TensorLike, index: np.ndarray) -> Tensor:
    """
    Rows of x selected by index (repeats allowed).
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    return _result(
        "gather", x.data[index], (x,), lambda g, out: (segment_sum(g, index, n),)
    )


def segment_sum(
    values: TensorLike, segment_ids: np.ndarray, num_segments: int
) -> Tensor:
    """
    Scatter-add rows of values into num_segments rows, in input order.
    """
    values = as_tensor(values)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if len(segment_ids) != values.shape[0]:
        raise ShapeMismatch(
            f"{len(segment_ids)} segment ids for {values.shape[0]} rows"
        )
    data = np.zeros((num_segments,) + values.shape[1:])
    np.add.at(data, segment_ids, values.data)
    return _result(
        "segment_sum", data, (values,), lambda g, out: (gather(g, segment_ids),)
    )


# Arithmetic


def _broadcast_check(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"Shapes {a.shape} and {b.shape} do not broadcast")


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    return _result(
        "add",
        a.data + b.data,
        (a, b),
        lambda g, out: (sum_to(g, a.shape), sum_to(g, b.shape)),
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    return _result(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g, out: (sum_to(g, a.shape), neg(sum_to(g, b.shape))),
    )


def neg(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return _result("neg", -x.data, (x,), lambda g, out: (neg(g),))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    return _result(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g, out: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)),
    )


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    return _result(
        "div",
        a.data / b.data,
        (a, b),
        lambda g, out: (
            sum_to(div(g, b), a.shape),
            sum_to(neg(div(mul(g, out), b)), b.shape),
        ),
    )


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"Cannot multiply {a.shape} by {b.shape}")
    return _result(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g, out: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def square(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return _result(
        "square", x.data * x.data, (x,), lambda g, out: (mul(g, mul(x, 2.0)),)
    )


def sqrt(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return _result(
        "sqrt", np.sqrt(x.data), (x,), lambda g, out: (div(g, mul(out, 2.0)),)
    )


# Activations


def sigmoid(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return _result(
        "sigmoid",
        expit(x.data),
        (x,),
        lambda g, out: (mul(g, mul(out, sub(1.0, out))),),
    )


def tanh(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return _result(
        "tanh", np.tanh(x.data), (x,), lambda g, out: (mul(g, sub(1.0, square(out))),)
    )


def relu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    mask = (x.data > 0).astype(np.float64)
    return _result("relu", x.data * mask, (x,), lambda g, out: (mul(g, mask),))


def identity(x: TensorLike) -> Tensor:
    return as_tensor(x)


# Reductions


def reduce_sum(
    x: TensorLike, axis: Optional[int] = None, keepdims: bool = False
) -> Tensor:
    x = as_tensor(x)
    original = x.shape
    data = x.data.sum(axis=axis, keepdims=True)
    kept = data.shape
    if not keepdims:
        data = data.sum() if axis is None else data.squeeze(axis=axis)

    def backward(g, out):
        return (expand(reshape(g, kept), original),)

    return _result("reduce_sum", np.asarray(data), (x,), backward)


def reduce_mean(
    x: TensorLike, axis: Optional[int] = None, keepdims: bool = False
) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def euclidean_norm(x: TensorLike) -> Tensor:
    x = as_tensor(x)

    def backward(g, out):
        if out.data == 0.0:
            return (Tensor(np.zeros(x.shape)),)
        return (mul(div(g, out), x),)

    return _result("euclidean_norm", np.asarray(np.linalg.norm(x.data)), (x,), backward)


def layer_norm_core(x: TensorLike, eps: float = 1e-5) -> Tensor:
    """
    (x - mean) / sqrt(var + eps) over the last axis, population variance.
    """
    x = as_tensor(x)
    centered = sub(x, reduce_mean(x, axis=-1, keepdims=True))
    variance = reduce_mean(square(centered), axis=-1, keepdims=True)
    return div(centered, sqrt(add(variance, eps)))


# Reverse sweep


def topological_order(root: Tensor) -> list[Tensor]:
    """
    Traced nodes reachable from root, inputs before the nodes using them.
    """
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]

    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    return order


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    seed: Optional[TensorLike] = None,
    create_graph: bool = False,
    order: Optional[list[Tensor]] = None,
) -> list[Tensor]:
    """
    seedᵀ · d(output)/d(input) for every input. Inputs the output does not
    depend on get zeros.
    """
    if seed is None:
        if output.size != 1:
            raise ShapeMismatch("A seed is required for non-scalar outputs")
        seed = np.ones(output.shape)
    seed = as_tensor(seed)
    if seed.shape != output.shape:
        raise ShapeMismatch(f"Seed shape {seed.shape} != output shape {output.shape}")

    wanted = {id(t) for t in inputs}
    found: dict[int, Tensor] = {}

    if not output.requires_grad:
        return [Tensor(np.zeros(t.shape)) for t in inputs]

    if order is None:
        order = topological_order(output)

    adjoints: dict[int, Tensor] = {id(output): seed}

    with _grad_mode(create_graph):
        for node in reversed(order):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                found[id(node)] = g
            if node.backward is None:
                continue

            parent_grads = node.backward(g, node)
            for parent, pg in zip(node.parents, parent_grads):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = add(adjoints[key], pg)
                else:
                    adjoints[key] = pg

    result = []
    for t in inputs:
        g = found.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape))
        elif not create_graph:
            g = g.detach()
        result.append(g)
    return result


class Trace:
    """
    One recorded evaluation, kept for repeated vector-Jacobian products.
    """

    def __init__(self, output: Tensor, inputs: Sequence[Tensor]) -> None:
        self.output = output
        self.inputs = list(inputs)
        self.order = topological_order(output) if output.requires_grad else []

    def vjp(self, seed: TensorLike, create_graph: bool = False) -> list[Tensor]:
        return grad(
            self.output, self.inputs, seed, create_graph=create_graph, order=self.order
        )


def vjp(
    fn: Callable[..., Tensor],
    inputs: Sequence[TensorLike],
    seed: TensorLike,
    create_graph: bool = False,
) -> tuple[Tensor, list[Tensor]]:
    """
    Evaluate fn at inputs and return (output, seedᵀ J_fn) per input.
    """
    leaves = [Tensor(as_tensor(x).data, requires_grad=True) for x in inputs]
    with enable_grad():
        output = fn(*leaves)
    return output, grad(output, leaves, seed, create_graph=create_graph)
