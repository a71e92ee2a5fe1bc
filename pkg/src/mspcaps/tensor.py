"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable result records its parents and a backward rule that maps
the incoming gradient to one gradient per parent. `backward` walks the graph in
reverse creation order, so each node is visited exactly once.
"""

import itertools
import math
import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from typing import Any, Optional, Union

import numpy as np

from mspcaps.errors import AxisError, ContractError, DomainError, NumericError, ShapeError

BackwardRule = Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]
Axis = Union[int, tuple[int, ...], None]

_creation_order = itertools.count()
_state = threading.local()


def get_default_dtype() -> np.dtype:
    """Return the dtype new tensors are created with on this thread."""
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype: Any) -> None:
    """Set the dtype new tensors are created with on this thread."""
    _state.dtype = np.dtype(dtype)


@contextmanager
def precision(dtype: Any) -> Iterator[None]:
    """Temporarily switch the default dtype, e.g. to float64 for gradient checks."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    """Return whether new operations record the gradient graph."""
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording, e.g. for evaluation."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """An n-dimensional array that can take part in a gradient graph."""

    __array_ufunc__ = None  # make numpy defer to the reflected operators
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_order")

    def __init__(self, data: Any, *, requires_grad: bool = False, dtype: Any = None):
        array = np.array(data, dtype=dtype or get_default_dtype())
        if any(extent < 1 for extent in array.shape):
            raise ShapeError(f"tensor extents must be >= 1, got shape {array.shape}")
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardRule] = None
        self._op = "leaf"
        self._order = next(_creation_order)

    @classmethod
    def derive(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: BackwardRule,
        op: str,
    ) -> "Tensor":
        """Wrap the result of an operation and record it in the graph when needed."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._op = op
        out._order = next(_creation_order)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Return a copy of the underlying array."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        # Never in place: the same array may be handed to several parents.
        self.grad = grad if self.grad is None else self.grad + grad

    def backward(self) -> None:
        backward(self)

    # Operators

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: Any) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axis, keepdims)

    def max(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)


def as_tensor(value: Any, like: Optional[Tensor] = None) -> Tensor:
    """Return `value` as a tensor, matching the dtype of `like` for plain numbers."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Return the trailing-dimension broadcast of two shapes."""
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible") from None


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeezed = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    if squeezed:
        grad = grad.sum(axis=squeezed, keepdims=True)
    return grad.reshape(shape)


def _binary(a: Any, b: Any) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    broadcast_shape(a.shape, b.shape)
    return a, b


# Elementwise operations


def add(a: Any, b: Any) -> Tensor:
    """Elementwise a + b with broadcasting."""
    a, b = _binary(a, b)

    def rule(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor.derive(a.data + b.data, (a, b), rule, "add")


def sub(a: Any, b: Any) -> Tensor:
    """Elementwise a - b with broadcasting."""
    a, b = _binary(a, b)

    def rule(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor.derive(a.data - b.data, (a, b), rule, "sub")


def mul(a: Any, b: Any) -> Tensor:
    """Elementwise a * b with broadcasting."""
    a, b = _binary(a, b)

    def rule(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return Tensor.derive(a.data * b.data, (a, b), rule, "mul")


def div(a: Any, b: Any) -> Tensor:
    """Elementwise a / b with broadcasting."""
    a, b = _binary(a, b)

    def rule(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor.derive(a.data / b.data, (a, b), rule, "div")


def neg(a: Tensor) -> Tensor:
    """Negate every element."""
    return Tensor.derive(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    """Elementwise max(a, 0); the gradient at 0 is 0."""
    mask = a.data > 0
    return Tensor.derive(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    """Elementwise exponential."""
    out = np.exp(a.data)
    return Tensor.derive(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    """Elementwise natural logarithm."""
    if np.any(a.data < 0):
        raise DomainError("log of a negative value")
    return Tensor.derive(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root."""
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return Tensor.derive(out, (a,), lambda g: (g / (2 * out),), "sqrt")


def power(a: Any, exponent: Any) -> Tensor:
    """Raise `a` to `exponent`, a plain number or a tensor."""
    if not isinstance(exponent, Tensor):
        a = as_tensor(a)
        p = float(exponent)
        out = a.data**p
        return Tensor.derive(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "power")
    a, b = _binary(a, exponent)
    out = a.data**b.data

    def rule(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        grad_b = None
        if b.requires_grad:
            grad_b = unbroadcast(g * out * np.log(a.data), b.shape)
        return unbroadcast(g * b.data * a.data ** (b.data - 1), a.shape), grad_b

    return Tensor.derive(out, (a, b), rule, "power")


_ELEMENTWISE: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "power": power,
}


def elementwise(op: str, a: Any, b: Any = None) -> Tensor:
    """Apply the elementwise operation named `op`."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    if op in ("neg", "relu", "exp", "log", "sqrt"):
        return fn(as_tensor(a))
    if b is None:
        raise ContractError(f"elementwise op {op!r} needs two operands")
    return fn(a, b)


# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Multiply the trailing two dimensions, broadcasting the leading ones."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    broadcast_shape(a.shape[:-2], b.shape[:-2])

    def rule(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        grad_a = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        grad_b = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return grad_a, grad_b

    return Tensor.derive(a.data @ b.data, (a, b), rule, "matmul")


# Reductions


def normalize_axis(axis: Axis, ndim: int) -> Optional[tuple[int, ...]]:
    """Turn `axis` into a tuple of non-negative axes, raising `AxisError` when invalid."""
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise AxisError(f"axis {ax} is out of range for a tensor of rank {ndim}")
        normalized.append(ax % ndim)
    if len(set(normalized)) != len(normalized):
        raise AxisError(f"repeated axis in {axis}")
    return tuple(normalized)


def _single_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise AxisError(f"axis {axis} is out of range for a tensor of rank {ndim}")
    return axis % ndim


def _expand(g: np.ndarray, axes: Optional[tuple[int, ...]], ndim: int, keepdims: bool) -> np.ndarray:
    if keepdims:
        return g
    if axes is None:
        return g.reshape((1,) * ndim)
    for ax in sorted(axes):
        g = np.expand_dims(g, ax)
    return g


def reduce(op: str, x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    """Reduce `x` with `op` in {sum, mean, max} along `axis`."""
    axes = normalize_axis(axis, x.ndim)
    if op == "sum":
        out = np.sum(x.data, axis=axes, keepdims=keepdims)

        def rule(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
            return (np.broadcast_to(_expand(g, axes, x.ndim, keepdims), x.shape).copy(),)

    elif op == "mean":
        count = x.size if axes is None else math.prod(x.shape[ax] for ax in axes)
        out = np.mean(x.data, axis=axes, keepdims=keepdims)

        def rule(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
            return (np.broadcast_to(_expand(g, axes, x.ndim, keepdims) / count, x.shape).copy(),)

    elif op == "max":
        if axes is not None and len(axes) != 1:
            raise AxisError("max reduces over a single axis or all axes")
        out = np.max(x.data, axis=axes, keepdims=keepdims)

        def rule(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
            # np.argmax returns the first occurrence: ties go to the lowest index.
            mask = np.zeros_like(x.data)
            if axes is None:
                mask.reshape(-1)[np.argmax(x.data)] = 1
            else:
                idx = np.expand_dims(np.argmax(x.data, axis=axes[0]), axes[0])
                np.put_along_axis(mask, idx, 1, axis=axes[0])
            return (mask * _expand(g, axes, x.ndim, keepdims),)

    else:
        raise ContractError(f"unknown reduction {op!r}")
    return Tensor.derive(np.asarray(out, dtype=x.dtype), (x,), rule, op)


def vector_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along `axis`; the gradient at the origin is taken as zero."""
    ax = _single_axis(axis, x.ndim)
    norm = np.sqrt(np.sum(x.data * x.data, axis=ax, keepdims=True))

    def rule(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        g = g if keepdims else np.expand_dims(g, ax)
        unit = np.divide(x.data, norm, out=np.zeros_like(x.data), where=norm > 0)
        return (g * unit,)

    out = norm if keepdims else np.squeeze(norm, axis=ax)
    return Tensor.derive(out, (x,), rule, "norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`."""
    ax = _single_axis(axis, x.ndim)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data - np.max(x.data, axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=ax, keepdims=True)

    def rule(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return (out * (g - np.sum(g * out, axis=ax, keepdims=True)),)

    return Tensor.derive(out, (x,), rule, "softmax")


# Shape manipulation (results never alias their inputs)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Return a copy of `x` with a new shape."""
    try:
        out = np.reshape(x.data, tuple(shape)).copy()
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return Tensor.derive(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; reverse them when `axes` is None."""
    perm = tuple(reversed(range(x.ndim))) if axes is None else tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(perm))
    out = np.ascontiguousarray(np.transpose(x.data, perm))
    return Tensor.derive(out, (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def take(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather entries of `x` along `axis`; `index` may have any shape."""
    ax = _single_axis(axis, x.ndim)
    index = np.asarray(index, dtype=np.intp)
    out = np.take(x.data, index, axis=ax)

    def rule(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        grad = np.zeros((x.shape[ax], *np.delete(x.shape, ax)), dtype=g.dtype)
        moved = np.moveaxis(g, tuple(range(ax, ax + index.ndim)), tuple(range(index.ndim)))
        np.add.at(grad, index, moved.reshape(*index.shape, *grad.shape[1:]))
        return (np.moveaxis(grad, 0, ax),)

    return Tensor.derive(out, (x,), rule, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along `axis`."""
    ax = _single_axis(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {ax}") from None
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def rule(g: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor.derive(out, tuple(tensors), rule, "concat")


# Graph traversal


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Return every tensor reachable from `root` that requires grad, in creation order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda t: t._order)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into `t.grad` for every reachable tensor `t`."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root does not require grad")
    nodes = graph_nodes(root)
    # Interior gradients belong to a single pass; only leaves accumulate across calls.
    for node in nodes:
        if node._parents:
            node.grad = None
    root._accumulate(np.ones_like(root.data))
    for node in reversed(nodes):
        if node._backward is None or node.grad is None:
            continue
        for parent, grad in zip(node._parents, node._backward(node.grad)):
            if grad is not None and parent.requires_grad:
                parent._accumulate(grad.astype(parent.dtype, copy=False))
