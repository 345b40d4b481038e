import threading
from contextlib import contextmanager
from typing import Any, Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from alltok.exceptions import ContractError, DimensionError
from alltok.types import DType

DTYPES = {"f32": np.float32, "f64": np.float64}
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Operand = Union["Tensor", np.ndarray, float, int]

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return bool(getattr(_grad_state, "enabled", True))


@contextmanager
def no_grad() -> Iterator[None]:
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def dtype_of(name: DType) -> Any:  # noqa: ANN401
    return DTYPES[name]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_basic_index(index: Any) -> bool:  # noqa: ANN401
    items = index if isinstance(index, tuple) else (index,)
    return all(
        isinstance(item, (slice, int, np.integer)) or item is None or item is Ellipsis
        for item in items
    )


class Tensor:
    """Dense array node of the reverse-mode tape.

    Tensors created from operations on tensors that require a gradient keep a
    reference to their parents and a backward closure; leaves accumulate their
    gradient into ``grad`` when ``backward`` is called on a scalar result.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data: Any,  # noqa: ANN401
        requires_grad: bool = False,
        dtype: Optional[DType] = None,
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(DTYPES[dtype], copy=False)
        elif array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float32)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = ""

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: BackwardFn,
        op: str,
    ) -> "Tensor":
        out = cls(data)
        if is_grad_enabled() and any(parent.requires_grad for parent in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def dtype(self) -> Any:  # noqa: ANN401
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return int(self.data.shape[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _topological_order(self) -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(self._topological_order()):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            parent_grads = node._backward(node_grad)  # type: ignore[misc]
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    def __add__(self, other: Operand) -> "Tensor":
        other_ = as_tensor(other, like=self)
        a_shape, b_shape = self.shape, other_.shape
        return Tensor.from_op(
            self.data + other_.data,
            (self, other_),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    def __radd__(self, other: Operand) -> "Tensor":
        return self + other

    def __neg__(self) -> "Tensor":
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other: Operand) -> "Tensor":
        return self + (-as_tensor(other, like=self))

    def __rsub__(self, other: Operand) -> "Tensor":
        return as_tensor(other, like=self) + (-self)

    def __mul__(self, other: Operand) -> "Tensor":
        other_ = as_tensor(other, like=self)
        a, b = self.data, other_.data
        return Tensor.from_op(
            a * b,
            (self, other_),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    def __rmul__(self, other: Operand) -> "Tensor":
        return self * other

    def __truediv__(self, other: Operand) -> "Tensor":
        other_ = as_tensor(other, like=self)
        a, b = self.data, other_.data
        return Tensor.from_op(
            a / b,
            (self, other_),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            "div",
        )

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return as_tensor(other, like=self) / self

    def __pow__(self, exponent: float) -> "Tensor":
        a = self.data
        return Tensor.from_op(
            a**exponent,
            (self,),
            lambda g: (g * exponent * a ** (exponent - 1),),
            "pow",
        )

    def __matmul__(self, other: Operand) -> "Tensor":
        other_ = as_tensor(other, like=self)
        a, b = self.data, other_.data
        if a.ndim < 2 or b.ndim < 2:  # noqa: PLR2004
            raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

        def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            grad_a = g @ np.swapaxes(b, -1, -2)
            grad_b = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

        return Tensor.from_op(a @ b, (self, other_), backward, "matmul")

    def __getitem__(self, index: Any) -> "Tensor":  # noqa: ANN401
        shape, dtype = self.shape, self.data.dtype
        basic = _is_basic_index(index)

        def backward(g: np.ndarray) -> Tuple[np.ndarray]:
            full = np.zeros(shape, dtype=dtype)
            if basic:
                full[index] += g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor.from_op(self.data[index], (self,), backward, "getitem")

    def sum(self, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g: np.ndarray) -> Tuple[np.ndarray]:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis: Union[None, int, Tuple[int, ...]] = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape: Any) -> "Tensor":  # noqa: ANN401
        original = self.shape
        target = shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape
        return Tensor.from_op(self.data.reshape(target), (self,), lambda g: (g.reshape(original),), "reshape")

    def transpose(self, *axes: int) -> "Tensor":
        axes_ = tuple(axes) if axes else tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes_))
        return Tensor.from_op(
            self.data.transpose(axes_), (self,), lambda g: (g.transpose(inverse),), "transpose"
        )

    @property
    def T(self) -> "Tensor":  # noqa: N802
        return self.transpose()

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        return Tensor.from_op(np.log(a), (self,), lambda g: (g / a,), "log")

    def sigmoid(self) -> "Tensor":
        out = _stable_sigmoid(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * out * (1 - out),), "sigmoid")

    def softplus(self) -> "Tensor":
        a = self.data
        out = np.maximum(a, 0) + np.log1p(np.exp(-np.abs(a)))
        return Tensor.from_op(out, (self,), lambda g: (g * _stable_sigmoid(a),), "softplus")

    def astype(self, dtype: DType) -> "Tensor":
        source = self.data.dtype
        return Tensor.from_op(
            self.data.astype(DTYPES[dtype]), (self,), lambda g: (g.astype(source),), "astype"
        )


def _stable_sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    positive = a >= 0
    out[positive] = 1 / (1 + np.exp(-a[positive]))
    exp_a = np.exp(a[~positive])
    out[~positive] = exp_a / (1 + exp_a)
    return out


def as_tensor(value: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    array = np.asarray(value)
    if like is not None:
        array = array.astype(like.data.dtype, copy=False)
    return Tensor(array)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor.from_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def where(condition: np.ndarray, a: Operand, b: Operand) -> Tensor:
    a_ = as_tensor(a)
    b_ = as_tensor(b, like=a_)
    condition = np.asarray(condition, dtype=bool)
    zero = np.zeros((), dtype=a_.data.dtype)
    return Tensor.from_op(
        np.where(condition, a_.data, b_.data),
        (a_, b_),
        lambda g: (
            _unbroadcast(np.where(condition, g, zero), a_.shape),
            _unbroadcast(np.where(condition, zero, g), b_.shape),
        ),
        "where",
    )


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError as e:
        raise DimensionError(f"Mask shape {mask.shape} does not broadcast to {x.shape}") from e
    keep = ~mask
    return Tensor.from_op(
        np.where(mask, np.asarray(value, dtype=x.data.dtype), x.data),
        (x,),
        lambda g: (_unbroadcast(np.where(keep, g, 0).astype(g.dtype), x.shape),),
        "masked_fill",
    )
