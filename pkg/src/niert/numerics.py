"""Dense linear algebra, Adam, and gradient-verification utilities."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import GraphNotRecorded, NonFiniteValue, ShapeMismatch, SingularSystem

_PIVOT_TOL = 1e-12


def linear_solve(a: np.ndarray, b: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Solve (A + ridge*I) x = b by Gaussian elimination with partial pivoting.

    Raises SingularSystem when a pivot falls below 1e-12 and no ridge was
    supplied. `b` may be a vector or a matrix of right-hand sides.
    """
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise ShapeMismatch(f"expected square matrix, got {a.shape}")
    if b.shape[0] != n:
        raise ShapeMismatch(f"rhs length {b.shape[0]} != {n}")
    if ridge < 0:
        raise ShapeMismatch("ridge must be >= 0")
    if ridge > 0:
        a = a + ridge * np.eye(n)
    vec = b.ndim == 1
    x = b.reshape(n, -1).copy()

    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[p, k]) < _PIVOT_TOL:
            raise SingularSystem(f"pivot {abs(a[p, k]):.3e} below tolerance at column {k}")
        if p != k:
            a[[k, p]] = a[[p, k]]
            x[[k, p]] = x[[p, k]]
        factors = a[k + 1:, k] / a[k, k]
        a[k + 1:, k + 1:] -= np.outer(factors, a[k, k + 1:])
        x[k + 1:] -= np.outer(factors, x[k])

    for k in range(n - 1, -1, -1):
        x[k] = (x[k] - a[k, k + 1:] @ x[k + 1:]) / a[k, k]
    return x[:, 0] if vec else x


@dataclass
class AdamState:
    """Adam accumulator for one flat parameter vector."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_rate: float = 1.0
    step: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    @classmethod
    def init(cls, num_params: int, lr: float, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8,
             decay_rate: float = 1.0) -> "AdamState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   decay_rate=decay_rate, step=0,
                   m=np.zeros(num_params), v=np.zeros(num_params))

    def decay_lr(self):
        """Apply the per-epoch multiplicative LR decay."""
        self.lr *= self.decay_rate


def adam_step(params: np.ndarray, grads: np.ndarray,
              state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new params and mutated state."""
    if params.shape != grads.shape:
        raise ShapeMismatch(f"params {params.shape} vs grads {grads.shape}")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    if state.m.shape != params.shape:
        raise ShapeMismatch(f"state moments {state.m.shape} vs params {params.shape}")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads ** 2
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), state


def finite_diff_grad(f, p: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    p = np.asarray(p, dtype=np.float64)
    grad = np.empty_like(p)
    for i in range(p.size):
        step = np.zeros_like(p)
        step.flat[i] = h
        hi = f(p + step)
        lo = f(p - step)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteValue(f"f non-finite near coordinate {i}")
        grad.flat[i] = (hi - lo) / (2.0 * h)
    return grad


def backprop_gradients(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a recorded scalar loss w.r.t. named parameters."""
    if not loss.parents:
        raise GraphNotRecorded("loss carries no recorded forward computation")
    for t in params.values():
        t.grad = None
    loss.backward()
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.value))
            for name, t in params.items()}


def flatten_params(params: dict[str, Tensor | np.ndarray]) -> np.ndarray:
    """Concatenate named tensors (in dict order) into one flat vector."""
    return np.concatenate([np.asarray(getattr(t, "value", t)).ravel()
                           for t in params.values()])


def unflatten_params(flat: np.ndarray, like: dict[str, Tensor | np.ndarray]) -> dict[str, np.ndarray]:
    """Inverse of flatten_params, using `like` for names and shapes."""
    out = {}
    offset = 0
    for name, t in like.items():
        shape = np.asarray(getattr(t, "value", t)).shape
        size = int(np.prod(shape)) if shape else 1
        out[name] = flat[offset:offset + size].reshape(shape)
        offset += size
    if offset != flat.size:
        raise ShapeMismatch(f"flat vector length {flat.size}, expected {offset}")
    return out
