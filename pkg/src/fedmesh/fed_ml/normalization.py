"""Federated feature scaling: standardization, min-max and max-abs.

Clients share per-feature moments only. Variances are pooled with the
parallel (Chan et al.) update from local centered sums of squares, which
avoids the cancellation of the raw ``sum(x**2)/n - mean**2`` form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

MODES = ("standard", "minmax", "maxabs")


@dataclass
class Moments:
    n: int
    total: np.ndarray  # sum of x
    sumsq: np.ndarray  # sum of x**2
    m2: np.ndarray  # sum of (x - local mean)**2
    min: np.ndarray
    max: np.ndarray
    maxabs: np.ndarray


@dataclass
class ScalingParams:
    mode: str
    center: np.ndarray
    scale: np.ndarray
    passthrough: np.ndarray  # bool; features left untouched
    warnings: list[str] = field(default_factory=list)


def fed_normalize_stats(X: np.ndarray) -> Moments:
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("no samples")
    mean = X.mean(axis=0)
    return Moments(
        n=n,
        total=X.sum(axis=0),
        sumsq=(X * X).sum(axis=0),
        m2=((X - mean) ** 2).sum(axis=0),
        min=X.min(axis=0),
        max=X.max(axis=0),
        maxabs=np.abs(X).max(axis=0),
    )


def pooled_mean_var(moments: Sequence[Moments]) -> tuple[np.ndarray, np.ndarray, int]:
    n = 0
    mean = None
    m2 = None
    for m in moments:
        local_mean = m.total / m.n
        if mean is None:
            n, mean, m2 = m.n, local_mean, m.m2.copy()
            continue
        delta = local_mean - mean
        tot = n + m.n
        mean = mean + delta * (m.n / tot)
        m2 = m2 + m.m2 + delta**2 * (n * m.n / tot)
        n = tot
    return mean, m2 / n, n


def aggregate_norm(moments: Sequence[Moments], mode: str = "standard", names: Sequence[str] | None = None) -> ScalingParams:
    if not moments:
        raise ValueError("no moments to aggregate")
    if mode not in MODES:
        raise ValueError(f"unknown scaling mode {mode!r}; use one of {MODES}")
    dims = {m.total.shape for m in moments}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature counts across clients: {sorted(dims)}")
    if mode == "standard":
        center, var, _ = pooled_mean_var(moments)
        scale = np.sqrt(var)
        flat = scale <= 1e-12 * np.maximum(1.0, np.abs(center))
    elif mode == "minmax":
        lo = np.min([m.min for m in moments], axis=0)
        hi = np.max([m.max for m in moments], axis=0)
        center, scale = lo, hi - lo
        flat = scale == 0
    else:
        center = np.zeros_like(moments[0].total)
        scale = np.max([m.maxabs for m in moments], axis=0)
        flat = scale == 0
    warnings = []
    for j in np.flatnonzero(flat):
        label = names[j] if names is not None else f"#{j}"
        warnings.append(f"feature {label} has zero spread; left unscaled")
        logger.warning(warnings[-1])
    return ScalingParams(mode, center, np.where(flat, 1.0, scale), flat, warnings)


def apply_scaling(X: np.ndarray, params: ScalingParams) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    out = (X - params.center) / params.scale
    return np.where(params.passthrough, X, out)
