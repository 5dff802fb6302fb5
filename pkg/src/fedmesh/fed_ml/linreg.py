from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import linalg

COND_LIMIT = 1e12


class SingularityError(ValueError):
    pass


def local_linreg_stats(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError(f"shape mismatch: X {X.shape}, y {y.shape}")
    return X.T @ X, X.T @ y, X.shape[0]


def _explain_singular(A: np.ndarray, names: Sequence[str] | None) -> str:
    w, v = np.linalg.eigh(A)
    null = v[:, 0]
    idx = np.flatnonzero(np.abs(null) > 0.1 * np.abs(null).max())
    labels = [names[i] if names is not None else f"#{i}" for i in idx]
    return f"near-collinear directions involve columns {labels} (smallest eigenvalue {w[0]:.3g})"


def solve_spd(A: np.ndarray, b: np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive definite ``A`` via Cholesky."""
    A = 0.5 * (A + A.T)
    w = np.linalg.eigvalsh(A)
    if w[0] <= 0 or w[-1] / w[0] > COND_LIMIT:
        raise SingularityError(f"matrix is singular or ill-conditioned: {_explain_singular(A, names)}")
    try:
        return linalg.cho_solve(linalg.cho_factor(A), b)
    except linalg.LinAlgError as exc:
        raise SingularityError(f"Cholesky failed: {_explain_singular(A, names)}") from exc


def aggregate_linreg(stats: Sequence[tuple[np.ndarray, np.ndarray, int]], names: Sequence[str] | None = None) -> np.ndarray:
    if not stats:
        raise ValueError("no statistics to aggregate")
    XtX = sum(np.asarray(s[0], dtype=np.float64) for s in stats)
    Xty = sum(np.asarray(s[1], dtype=np.float64) for s in stats)
    return solve_spd(XtX, Xty, names)


def ols(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Centralized least squares on pooled rows (SVD based)."""
    beta, *_ = np.linalg.lstsq(np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64), rcond=None)
    return beta
