#!/usr/bin/env python3
"""
Autodiff Engine

Minimal reverse-mode differentiation over float64 numpy arrays. Every primitive
records its parents and a backward closure; `backward` replays the resulting
tape in reverse topological order.
"""

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_grad_mode = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


def is_grad_enabled() -> bool:
    """Whether new operations are recorded on the tape (per thread)."""
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording for the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _broadcast_shape(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    """
    Resolve the output shape under trailing-axis broadcasting.

    One operand's shape must equal the trailing axes of the other's; scalars
    (shape ``()``) conform with everything.
    """
    if a == b:
        return a
    if len(b) <= len(a) and a[len(a) - len(b):] == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: shapes {a} and {b} do not conform under trailing-axis broadcasting")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad.reshape(shape)


class Tensor:
    """Shape-carrying float64 value array with an accumulated gradient."""

    # ndarray op Tensor must defer to the reflected Tensor method
    __array_ufunc__ = None

    def __init__(self, values: ArrayLike, requires_grad: bool = False):
        if isinstance(values, Tensor):
            values = values.values
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(self.values) if requires_grad else None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None
        self._op = ""

    # ------------------------------------------------------------------
    # construction helpers
    # ------------------------------------------------------------------
    @staticmethod
    def _lift(other: ArrayLike) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    @staticmethod
    def _result(values: np.ndarray, parents: Tuple["Tensor", ...], op: str,
                backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> "Tensor":
        out = Tensor(values)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out._op = op
        return out

    # ------------------------------------------------------------------
    # basic properties
    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # elementwise arithmetic
    # ------------------------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        other = Tensor._lift(other)
        _broadcast_shape("add", self.shape, other.shape)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._result(self.values + other.values, (self, other), "add", backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.values, (self,), "neg", lambda g: (-g,))

    def __sub__(self, other: ArrayLike) -> "Tensor":
        other = Tensor._lift(other)
        _broadcast_shape("sub", self.shape, other.shape)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._result(self.values - other.values, (self, other), "sub", backward)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Tensor._lift(other) - self

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = Tensor._lift(other)
        _broadcast_shape("mul", self.shape, other.shape)
        a, b = self.values, other.values

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._result(a * b, (self, other), "mul", backward)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = Tensor._lift(other)
        _broadcast_shape("div", self.shape, other.shape)
        a, b = self.values, other.values

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._result(a / b, (self, other), "div", backward)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return Tensor._lift(other) / self

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(other, self)

    # ------------------------------------------------------------------
    # unary primitives
    # ------------------------------------------------------------------
    def square(self) -> "Tensor":
        a = self.values
        return Tensor._result(a * a, (self,), "square", lambda g: (2.0 * a * g,))

    def exp(self) -> "Tensor":
        out_values = np.exp(self.values)
        return Tensor._result(out_values, (self,), "exp", lambda g: (g * out_values,))

    def log(self) -> "Tensor":
        a = self.values
        return Tensor._result(np.log(a), (self,), "log", lambda g: (g / a,))

    def silu(self) -> "Tensor":
        a = self.values
        s = expit(a)
        return Tensor._result(a * s, (self,), "silu", lambda g: (g * (s + a * s * (1.0 - s)),))

    def relu(self) -> "Tensor":
        a = self.values
        mask = (a > 0).astype(np.float64)
        return Tensor._result(a * mask, (self,), "relu", lambda g: (g * mask,))

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.shape
        return Tensor._result(self.values.reshape(shape), (self,), "reshape",
                              lambda g: (g.reshape(in_shape),))

    # ------------------------------------------------------------------
    # reductions
    # ------------------------------------------------------------------
    def sum(self, axis: Optional[int] = None) -> "Tensor":
        in_shape = self.shape
        if axis is None:
            return Tensor._result(np.array(self.values.sum()), (self,), "sum",
                                  lambda g: (np.broadcast_to(g, in_shape).copy(),))
        if axis not in (-1, self.ndim - 1):
            raise ShapeError(f"sum: only the last axis can be reduced, got axis={axis} for shape {in_shape}")
        return Tensor._result(self.values.sum(axis=-1), (self,), "sum",
                              lambda g: (np.broadcast_to(g[..., None], in_shape).copy(),))

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        count = self.size if axis is None else self.shape[-1]
        return self.sum(axis) * (1.0 / count)

    # ------------------------------------------------------------------
    # differentiation
    # ------------------------------------------------------------------
    def backward(self):
        backward(self)


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants; tensors pass through untouched."""
    return value if isinstance(value, Tensor) else Tensor(value)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.values, b.values

    def backward(g):
        return g @ bv.T, av.T @ g

    return Tensor._result(av @ bv, (a, b), "matmul", backward)


def concat(tensors: Iterable[ArrayLike], axis: int = -1) -> Tensor:
    """Concatenate along the last axis; leading axes must agree."""
    parts = [as_tensor(t) for t in tensors]
    if axis not in (-1, parts[0].ndim - 1):
        raise ShapeError(f"concat: only the last axis is supported, got axis={axis}")
    lead = parts[0].shape[:-1]
    for part in parts[1:]:
        if part.shape[:-1] != lead or part.ndim != parts[0].ndim:
            raise ShapeError(f"concat: shapes {parts[0].shape} and {part.shape} differ in leading axes")
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    values = np.concatenate([p.values for p in parts], axis=-1)
    return Tensor._result(values, tuple(parts), "concat", backward)


class ComputationTape:
    """Topologically ordered record of the operations that produced a tensor."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "ComputationTape":
        """Build the tape for ``root`` with an iterative depth-first walk."""
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
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
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay_backward(self, root: Tensor):
        grads = {id(root): np.ones_like(root.values)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            node.grad = g
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def backward(loss: Tensor):
    """
    Populate ``grad`` of every parameter reachable from a scalar loss.

    Args:
        loss: Scalar tensor

    Raises:
        ValueError: If the loss is not a scalar
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    ComputationTape.record(loss).replay_backward(loss)


def numerical_gradient(fn: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """
    Central finite-difference gradient of a scalar function w.r.t. ``param``.

    Args:
        fn: Zero-argument function re-evaluating the loss
        param: Parameter whose values are perturbed in place
        h: Step size

    Returns:
        Array of the same shape as the parameter
    """
    grad = np.zeros_like(param.values)
    flat = param.values.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn()
        flat[i] = original - h
        minus = fn()
        flat[i] = original
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    return grad


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-7) -> float:
    """Largest elementwise relative error, treating near-zero pairs absolutely."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(scale > abs_floor, diff / np.where(scale > 0, scale, 1.0), 0.0)
    rel = np.where((scale <= abs_floor) & (diff > abs_floor), np.inf, rel)
    return float(rel.max()) if rel.size else 0.0
