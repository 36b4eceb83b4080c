"""Classical interpolation baselines: multiquadric RBF and inverse-distance
weighting (Shepard's method)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .numerics import linear_solve
from .taskgen import InterpolationTask


def multiquadric(r2: np.ndarray, shape_c: float) -> np.ndarray:
    """phi(r) = sqrt(r^2 + c^2), applied to squared distances."""
    return np.sqrt(r2 + shape_c ** 2)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return (diff ** 2).sum(axis=2)


@dataclass
class RbfModel:
    centers: np.ndarray        # (n, d_x)
    coefficients: np.ndarray   # (n, d_y)
    shape_c: float
    ridge: float


def rbf_fit(observed_x: np.ndarray, observed_y: np.ndarray,
            shape_c: float = 1.0, ridge: float = 0.0) -> RbfModel:
    """Solve (Phi + ridge*I) lambda = Y with Phi_ij = phi(|x_i - x_j|)."""
    if shape_c <= 0:
        raise ShapeMismatch("shape_c must be positive")
    observed_x = np.atleast_2d(np.asarray(observed_x, dtype=np.float64))
    observed_y = np.asarray(observed_y, dtype=np.float64).reshape(observed_x.shape[0], -1)
    phi = multiquadric(_sq_dists(observed_x, observed_x), shape_c)
    lam = linear_solve(phi, observed_y, ridge=ridge)
    return RbfModel(centers=observed_x.copy(), coefficients=lam.reshape(observed_x.shape[0], -1),
                    shape_c=shape_c, ridge=ridge)


def rbf_eval(model: RbfModel, x: np.ndarray) -> np.ndarray:
    """f(x) = sum_j lambda_j phi(|x - x_j|), vectorized over query rows."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.centers.shape[1]:
        raise ShapeMismatch(f"query dim {x.shape[1]} vs centers {model.centers.shape[1]}")
    phi = multiquadric(_sq_dists(x, model.centers), model.shape_c)
    return phi @ model.coefficients


def idw_eval(observed_x: np.ndarray, observed_y: np.ndarray,
             x: np.ndarray, power: float = 2.0) -> np.ndarray:
    """Shepard interpolation; returns y_j exactly when a query hits x_j."""
    if power <= 0:
        raise ShapeMismatch("power must be positive")
    observed_x = np.atleast_2d(np.asarray(observed_x, dtype=np.float64))
    observed_y = np.asarray(observed_y, dtype=np.float64).reshape(observed_x.shape[0], -1)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != observed_x.shape[1]:
        raise ShapeMismatch(f"query dim {x.shape[1]} vs observed {observed_x.shape[1]}")
    d2 = _sq_dists(x, observed_x)
    out = np.empty((x.shape[0], observed_y.shape[1]))
    exact = d2 < 1e-24
    with np.errstate(divide="ignore"):
        w = d2 ** (-power / 2.0)
    for i in range(x.shape[0]):
        hits = np.nonzero(exact[i])[0]
        if hits.size:
            out[i] = observed_y[hits[0]]
        else:
            out[i] = (w[i] @ observed_y) / w[i].sum()
    return out


def rbf_predict_task(task: InterpolationTask, shape_c: float = 1.0,
                     ridge: float = 0.0) -> np.ndarray:
    model = rbf_fit(task.observed_x, task.observed_y, shape_c=shape_c, ridge=ridge)
    return rbf_eval(model, task.target_x)


def idw_predict_task(task: InterpolationTask, power: float = 2.0) -> np.ndarray:
    return idw_eval(task.observed_x, task.observed_y, task.target_x, power=power)
