"""Synthetic datasets shaped like the small clinical tables used for desk runs."""

from __future__ import annotations

from typing import Optional

import numpy as np
import pandas as pd


def _columns(p: int) -> list[str]:
    return [f"x{j + 1}" for j in range(p)]


def make_regression(n: int = 579, p: int = 10, seed: int = 0, noise: float = 1.0,
                    beta: Optional[np.ndarray] = None) -> tuple[pd.DataFrame, np.ndarray]:
    """``y = 3 + X beta + noise`` with heterogeneous feature scales."""
    rng = np.random.default_rng(seed)
    scales = rng.uniform(0.5, 20.0, p)
    offsets = rng.uniform(-50.0, 50.0, p)
    X = rng.normal(size=(n, p)) * scales + offsets
    if beta is None:
        beta = rng.normal(size=p) / scales
    y = 3.0 + X @ beta + noise * rng.normal(size=n)
    df = pd.DataFrame(X, columns=_columns(p))
    df["y"] = y
    return df, np.asarray(beta)


def make_classification(n: int = 579, p: int = 10, seed: int = 0, separation: float = 1.2,
                        positive_rate: float = 0.5) -> pd.DataFrame:
    """Two Gaussian classes whose means are ``separation`` apart (Mahalanobis)."""
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < positive_rate).astype(np.int64)
    direction = rng.normal(size=p)
    direction /= np.linalg.norm(direction)
    Z = rng.normal(size=(n, p)) + np.outer(y, separation * direction)
    scales = rng.uniform(0.5, 20.0, p)
    offsets = rng.uniform(-50.0, 50.0, p)
    df = pd.DataFrame(Z * scales + offsets, columns=_columns(p))
    df["y"] = y
    return df
