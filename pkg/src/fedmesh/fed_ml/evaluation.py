"""Classifier and regression metrics that pool exactly across clients.

Confusion counts are integers, so their component-wise sum is the pooled
confusion. Regression clients ship their sorted absolute residuals; the
coordinator recomputes every error metric from the concatenation with
correctly rounded sums (``math.fsum``), which makes the pooled result
independent of how rows were spread over clients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "ConfusionCounts":
        t = np.asarray(y_true).astype(np.int64)
        p = np.asarray(y_pred).astype(np.int64)
        if t.shape != p.shape:
            raise ValueError("label and prediction lengths differ")
        return cls(
            tp=int(np.sum((t == 1) & (p == 1))),
            fp=int(np.sum((t == 0) & (p == 1))),
            tn=int(np.sum((t == 0) & (p == 0))),
            fn=int(np.sum((t == 1) & (p == 0))),
        )


@dataclass
class ResidualSummary:
    n: int
    sum_abs: float
    sum_sq: float
    max_abs: float
    abs_residuals: np.ndarray = field(repr=False)

    @classmethod
    def from_residuals(cls, residuals) -> "ResidualSummary":
        a = np.sort(np.abs(np.asarray(residuals, dtype=np.float64)))
        return cls(
            n=int(a.shape[0]),
            sum_abs=math.fsum(a),
            sum_sq=math.fsum(a * a),
            max_abs=float(a[-1]) if a.size else 0.0,
            abs_residuals=a,
        )


def _ratio(num: float, den: float, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(f"{name}: zero denominator")
        return 0.0
    return num / den


def classification_metrics(c: ConfusionCounts) -> dict:
    if c.total <= 0:
        raise ValueError("empty confusion matrix")
    flags: list[str] = []
    precision = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", flags)
    f_score = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f_score", flags)
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    mcc = _ratio(c.tp * c.tn - c.fp * c.fn, math.sqrt(den), "mcc", flags)
    return {
        "accuracy": (c.tp + c.tn) / c.total,
        "precision": precision,
        "recall": recall,
        "f_score": f_score,
        "mcc": mcc,
        "n": c.total,
        "flags": flags,
    }


def regression_metrics_from_abs(abs_residuals: np.ndarray) -> dict:
    a = np.sort(np.asarray(abs_residuals, dtype=np.float64))
    n = a.shape[0]
    if n == 0:
        raise ValueError("no residuals")
    mse = math.fsum(a * a) / n
    return {
        "mae": math.fsum(a) / n,
        "mse": mse,
        "rmse": math.sqrt(mse),
        "max_error": float(a[-1]),
        "median_absolute_error": float(np.median(a)),
        "n": int(n),
    }


def regression_metrics(y_true, y_pred) -> dict:
    return regression_metrics_from_abs(np.abs(np.asarray(y_true, dtype=np.float64) - np.asarray(y_pred, dtype=np.float64)))


Local = Union[ConfusionCounts, ResidualSummary]


def aggregate_evaluation(locals_: Sequence[Local]) -> dict:
    if not locals_:
        raise ValueError("nothing to aggregate")
    if all(isinstance(x, ConfusionCounts) for x in locals_):
        total = ConfusionCounts()
        for c in locals_:
            total = total + c
        return classification_metrics(total)
    if all(isinstance(x, ResidualSummary) for x in locals_):
        for r in locals_:
            if r.n != r.abs_residuals.shape[0]:
                raise ValueError("residual summary is inconsistent with its residual list")
        return regression_metrics_from_abs(np.concatenate([r.abs_residuals for r in locals_]))
    raise ValueError("cannot mix classification and regression evaluations")
