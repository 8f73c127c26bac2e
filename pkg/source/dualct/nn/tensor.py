"""
Reverse-mode autodiff over numpy arrays.

Every op returns a Tensor holding its parents and a closure that maps the
output gradient to one gradient per parent (None where a parent does not
need one). `backward` walks the graph once in reverse topological order, so
shared subgraphs are visited a single time.
"""
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from ..dualct_error import ShapeError


def _as_values(values, dtype=None) -> np.ndarray:
    values = np.asarray(values)
    if dtype is not None:
        return values.astype(dtype, copy=False)
    if values.dtype != np.float64:
        values = values.astype(np.float32)
    return values


class Tensor:
    def __init__(self, values, parents: Sequence["Tensor"] = (), backward_fn: Callable = None, requires_grad=None, dtype=None):
        self.values = _as_values(values, dtype)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tensor_sum(self)


class Parameter(Tensor):
    """Trainable leaf; always collects gradients."""

    def __init__(self, values, name: str = "", dtype=None):
        super().__init__(values, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def detach(x: Tensor) -> Tensor:
    """Stop-gradient barrier: same values, no path back to `x`."""
    return Tensor(x.values, requires_grad=False)


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.values + b.values, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.values, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)

    def backward(g):
        ga = _unbroadcast(g * b.values, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.values, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor(a.values * b.values, (a, b), backward)


def square(a: Tensor) -> Tensor:
    return Tensor(a.values * a.values, (a,), lambda g: (2.0 * g * a.values,))


def tensor_sum(a: Tensor) -> Tensor:
    return Tensor(np.sum(a.values), (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def _topological_order(roots: Iterable[Tensor]):
    order, seen = [], set()
    stack = [(root, False) for root in roots]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward_many(pairs: Sequence[Tuple[Tensor, np.ndarray]]):
    """Accumulates d(sum_i <root_i, grad_i>) into the .grad of every leaf that requires it."""
    grads: Dict[int, np.ndarray] = {}
    roots = []
    for root, grad in pairs:
        grad = np.asarray(grad, dtype=root.dtype)
        if grad.shape != root.shape:
            raise ShapeError(f"Gradient shape {grad.shape} does not match output {root.shape}")
        if not root.requires_grad:
            continue
        grads[id(root)] = grads[id(root)] + grad if id(root) in grads else grad
        roots.append(root)

    for node in reversed(_topological_order(roots)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            grads[id(parent)] = grads[id(parent)] + pg if id(parent) in grads else pg


def backward(root: Tensor, grad=None):
    if grad is None:
        grad = np.ones(root.shape, dtype=root.dtype)
    backward_many([(root, grad)])
