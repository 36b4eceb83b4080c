"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; calling
``backward()`` on a scalar loss walks the recorded graph in reverse
topological order and accumulates exact gradients. Only the operations the
interpolator needs are implemented; everything runs in 64-bit so gradients
can be checked tightly against central finite differences.
"""

from __future__ import annotations

import numpy as np

from .errors import GraphNotRecorded, ShapeMismatch

_LN_EPS = 1e-5


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    # --- graph mechanics -------------------------------------------------

    def backward(self):
        if self.value.size != 1:
            raise ShapeMismatch("backward() requires a scalar output")
        if not self.parents:
            raise GraphNotRecorded("no recorded computation feeds this value")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, grad):
        if not self.requires_grad:
            return
        grad = _unbroadcast(grad, self.value.shape)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    # --- operations ------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value + other.value, parents=(self, other))
        out._backward = lambda g: (self._accum(g), other._accum(g))
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value - other.value, parents=(self, other))
        out._backward = lambda g: (self._accum(g), other._accum(-g))
        return out

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value * other.value, parents=(self, other))
        out._backward = lambda g: (self._accum(g * other.value),
                                   other._accum(g * self.value))
        return out

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / float(scalar))

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value @ other.value, parents=(self, other))

        def back(g):
            self._accum(_unbroadcast(g @ np.swapaxes(other.value, -1, -2),
                                     self.value.shape))
            other._accum(_unbroadcast(np.swapaxes(self.value, -1, -2) @ g,
                                      other.value.shape))

        out._backward = back
        return out

    def __getitem__(self, key):
        out = Tensor(self.value[key], parents=(self,))

        def back(g):
            full = np.zeros_like(self.value)
            full[key] = g
            self._accum(full)

        out._backward = back
        return out

    def reshape(self, *shape):
        out = Tensor(self.value.reshape(*shape), parents=(self,))
        out._backward = lambda g: self._accum(g.reshape(self.value.shape))
        return out

    def transpose(self, *axes):
        inv = np.argsort(axes)
        out = Tensor(self.value.transpose(axes), parents=(self,))
        out._backward = lambda g: self._accum(g.transpose(inv))
        return out

    def sum(self):
        out = Tensor(self.value.sum(), parents=(self,))
        out._backward = lambda g: self._accum(np.broadcast_to(g, self.value.shape))
        return out

    def mean(self):
        return self.sum() / self.value.size

    def relu(self):
        out = Tensor(np.maximum(self.value, 0.0), parents=(self,))
        out._backward = lambda g: self._accum(g * (self.value > 0.0))
        return out

    def abs(self):
        out = Tensor(np.abs(self.value), parents=(self,))
        out._backward = lambda g: self._accum(g * np.sign(self.value))
        return out

    def square(self):
        out = Tensor(self.value ** 2, parents=(self,))
        out._backward = lambda g: self._accum(g * 2.0 * self.value)
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis),
                 parents=tuple(tensors))
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accum(piece)

    out._backward = back
    return out


def softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, parents=(x,))

    def back(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        x._accum((g - dot) * s)

    out._backward = back
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.value.mean(axis=-1, keepdims=True)
    var = x.value.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x.value - mu) * inv
    out = Tensor(xhat * gain.value + bias.value, parents=(x, gain, bias))

    def back(g):
        gg = g * gain.value
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        x._accum(inv * (gg - m1 - xhat * m2))
        gain._accum(_unbroadcast(g * xhat, gain.value.shape))
        bias._accum(_unbroadcast(g, bias.value.shape))

    out._backward = back
    return out
