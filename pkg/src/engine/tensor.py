"""
tensor.py
Dense float64 tensors with a reverse-mode tape
"""
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.errors import GradientError, ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them on the tape"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """
    n-dimensional array of 64-bit reals with an optional gradient buffer.

    A tensor produced by a recorded op keeps its parents and a backward rule;
    leaves created with requires_grad=True are the trainable parameters.
    """
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Tuple["Tensor", ...] = (),
        _op: str = "",
    ):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = _op
        self._parents = _parents
        self._backward: Callable[[], None] = lambda: None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # --- recorded ops ----------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        out = make_result(self.data + other.data, (self, other), "add")

        def _backward():
            if self.requires_grad:
                self._accumulate(unbroadcast(out.grad, self.shape))
            if other.requires_grad:
                other._accumulate(unbroadcast(out.grad, other.shape))
        out._backward = _backward
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = make_result(-self.data, (self,), "neg")

        def _backward():
            self._accumulate(-out.grad)
        out._backward = _backward
        return out

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        out = make_result(self.data * other.data, (self, other), "mul")

        def _backward():
            if self.requires_grad:
                self._accumulate(unbroadcast(out.grad * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(unbroadcast(out.grad * self.data, other.shape))
        out._backward = _backward
        return out

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul needs [a, b] @ [b, c], got {self.shape} @ {other.shape}")
        out = make_result(self.data @ other.data, (self, other), "matmul")

        def _backward():
            if self.requires_grad:
                self._accumulate(out.grad @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ out.grad)
        out._backward = _backward
        return out

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            reshaped = self.data.reshape(shape)
        except ValueError as e:
            raise ShapeError(f"cannot reshape {self.shape} to {shape}") from e
        out = make_result(reshaped, (self,), "reshape")

        def _backward():
            self._accumulate(out.grad.reshape(self.shape))
        out._backward = _backward
        return out

    def transpose(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        out = make_result(self.data.transpose(axes), (self,), "transpose")
        inverse = np.argsort(axes)

        def _backward():
            self._accumulate(out.grad.transpose(inverse))
        out._backward = _backward
        return out

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> "Tensor":
        out = make_result(self.data.sum(axis=axis), (self,), "sum")

        def _backward():
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))
        out._backward = _backward
        return out

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis) * (1.0 / count)

    def backward(self) -> "ComputationTape":
        return backward(self)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_result(data: np.ndarray, parents: Tuple[Tensor, ...], op: str) -> Tensor:
    """Create an op output, linking parents only when a gradient can flow"""
    needs_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if needs_grad:
        return Tensor(data, requires_grad=True, _parents=parents, _op=op)
    return Tensor(data)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, extent in enumerate(shape):
        if extent == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


@dataclass
class ComputationTape:
    """Recorded ops in topological order: every node comes after its inputs"""
    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationTape":
        order: List[Tensor] = []
        visited = set()
        # Iterative post-order DFS; deep graphs must not hit the recursion limit
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
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
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(nodes=order)

    def replay_backward(self) -> None:
        for node in reversed(self.nodes):
            node._backward()


def backward(loss: Tensor) -> ComputationTape:
    """
    Populate grad of every parameter reachable from a scalar loss.

    Leaf gradients accumulate across calls; call zero_grad() between steps.

    Returns:
        The tape that was replayed
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any parameter that requires grad")
    tape = ComputationTape.from_root(loss)
    for node in tape.nodes:
        if not node.is_leaf:
            node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    tape.replay_backward()
    return tape
