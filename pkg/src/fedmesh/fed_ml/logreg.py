"""Federated logistic regression by Newton-Raphson on summed gradients
and Hessians."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linreg import SingularityError, solve_spd

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50


class SeparationError(SingularityError):
    """Summed Hessian is singular; the classes are probably separable."""

    def __init__(self, message: str, beta: np.ndarray):
        super().__init__(message)
        self.beta = beta


@dataclass
class GradientHessian:
    g: np.ndarray
    H: np.ndarray
    n_local: int


def quantization_tolerance(H: np.ndarray, n_clients: int, scale_exponent: int) -> float:
    """Smallest Newton step distinguishable from fixed-point rounding.

    Each client rounds its gradient to ``2**-scale_exponent``, so the summed
    gradient is off by at most ``n_clients * 2**-(scale_exponent + 1)`` per
    entry; through ``H^-1`` that bounds how far a step can move on noise
    alone. A factor of 4 leaves headroom for the rounding of ``H`` itself.
    """
    d = H.shape[0]
    lam = float(np.linalg.eigvalsh(H)[0])
    if lam <= 0:
        return np.inf
    return 4.0 * math.sqrt(d) * n_clients * 2.0 ** -(scale_exponent + 1) / lam


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_likelihood(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> float:
    z = X @ beta
    return float(np.sum(y * z - np.logaddexp(0.0, z)))


def local_logreg_step(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> GradientHessian:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic regression labels must be 0 or 1")
    p = sigmoid(X @ beta)
    g = X.T @ (y - p)
    H = (X * (p * (1.0 - p))[:, None]).T @ X
    return GradientHessian(g, H, X.shape[0])


def aggregate_logreg_step(
    parts: Sequence[GradientHessian],
    beta: np.ndarray,
    round_: int = 0,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> tuple[np.ndarray, bool]:
    """One Newton update from summed parts.

    ``round_`` counts updates already made; the result is flagged converged
    when the step is shorter than ``tol`` or ``round_ + 1`` reaches
    ``max_iter``.
    """
    g = sum(p.g for p in parts)
    H = sum(p.H for p in parts)
    return newton_update(g, H, beta, round_, tol, max_iter)


def newton_update(g, H, beta, round_: int = 0, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER):
    beta = np.asarray(beta, dtype=np.float64)
    try:
        step = solve_spd(np.asarray(H, dtype=np.float64), np.asarray(g, dtype=np.float64))
    except SingularityError as exc:
        raise SeparationError(f"Newton step impossible, perfect separation likely ({exc})", beta) from exc
    new = beta + step
    converged = bool(np.linalg.norm(new - beta) < tol or round_ + 1 >= max_iter)
    return new, converged


def newton_fit(X, y, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> tuple[np.ndarray, list[np.ndarray]]:
    """Centralized unpenalized Newton fit; returns (beta, iterate trajectory)."""
    beta = np.zeros(np.asarray(X).shape[1])
    path = []
    for r in range(max_iter):
        beta, done = aggregate_logreg_step([local_logreg_step(X, y, beta)], beta, r, tol, max_iter)
        path.append(beta)
        if done:
            break
    return beta, path


def predict_proba(X, beta) -> np.ndarray:
    return sigmoid(np.asarray(X, dtype=np.float64) @ beta)


def predict(X, beta) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) @ beta > 0).astype(np.int64)
