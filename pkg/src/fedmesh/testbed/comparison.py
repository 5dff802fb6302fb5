"""Federated vs centralized vs individual models, fold by fold.

The centralized and individual arms are computed directly in this process
from the files the simulated clients wrote during cross-validation, so
every arm sees exactly the same train/test rows as the federated run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from ..controller import StepSpec
from ..fed_ml import evaluation as ev
from ..fed_ml.data import add_intercept, xy
from ..fed_ml.forest import Forest, predict_forest, train_local_trees, tree_rngs
from ..fed_ml.linreg import ols
from ..fed_ml.logreg import SeparationError, newton_fit
from .partition import SplitPlan, partition_dataset, read_dataset
from .simulation import SimConfig, SimRun, run_once

MODELS = {
    "linreg": ("linear_regression", "regression_evaluation", "regression", {}),
    "logreg": ("logistic_regression", "classifier_evaluation", "classification", {}),
    "rf_class": ("random_forest", "classifier_evaluation", "classification", {"task": "classification"}),
    "rf_reg": ("random_forest", "regression_evaluation", "regression", {"task": "regression"}),
}


def standardize(train: np.ndarray, *others: np.ndarray) -> list[np.ndarray]:
    """Two-pass population standardization; constant columns pass through."""
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    flat = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
    sd = np.where(flat, 1.0, sd)
    return [np.where(flat, a, (a - mu) / sd) for a in (train, *others)]


class _Fitted:
    def __init__(self, kind: str, model):
        self.kind = kind
        self.model = model

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.kind == "linreg":
            return add_intercept(X) @ self.model
        if self.kind == "logreg":
            return (add_intercept(X) @ self.model > 0).astype(np.int64)
        return predict_forest(self.model, X)


def fit_model(kind: str, X, y, seed: int = 0, client_index: int = 0, split_index: int = 0,
              n_trees: int = 100, logreg_opts: Optional[dict] = None) -> _Fitted:
    if kind == "linreg":
        return _Fitted(kind, ols(add_intercept(X), y))
    if kind == "logreg":
        try:
            beta, _ = newton_fit(add_intercept(X), y, **(logreg_opts or {}))
        except SeparationError as exc:
            beta = exc.beta
        return _Fitted(kind, beta)
    task = MODELS[kind][3]["task"]
    n_classes = int(np.max(y)) + 1 if task == "classification" else 1
    n_classes = max(n_classes, 2) if task == "classification" else 1
    trees = train_local_trees(X, y, n_trees, task, n_classes, tree_rngs(seed, client_index, split_index, n_trees))
    return _Fitted(kind, Forest(trees, task, n_classes, n_trees))


def score(kind: str, y, pred) -> dict:
    if MODELS[kind][2] == "classification":
        m = ev.classification_metrics(ev.ConfusionCounts.from_predictions(y, pred))
        return {"accuracy": m["accuracy"], "mcc": m["mcc"]}
    m = ev.regression_metrics(y, pred)
    return {"rmse": m["rmse"], "mae": m["mae"]}


@dataclass
class FoldResult:
    fold: int
    central_pred: np.ndarray
    federated_pred: np.ndarray
    central_model: object
    federated_model: object
    rows: list[dict] = field(default_factory=list)


@dataclass
class ComparisonResult:
    model_kind: str
    folds: list[FoldResult]
    run: SimRun

    @property
    def primary(self) -> str:
        return "accuracy" if MODELS[self.model_kind][2] == "classification" else "rmse"

    def table(self) -> pd.DataFrame:
        return pd.DataFrame([r for f in self.folds for r in f.rows])

    def arm_means(self) -> dict[str, float]:
        df = self.table()
        return df.groupby("arm")[self.primary].mean().to_dict()

    def summary(self) -> str:
        means = self.arm_means()
        lines = [f"model {self.model_kind}, {len(self.folds)} folds, mean {self.primary} per arm:"]
        for arm in ("centralized", "federated", "individual_local", "individual_central"):
            if arm in means:
                lines.append(f"  {arm:<20} {means[arm]:.4f}")
        return "\n".join(lines)

    def write(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.table().to_csv(out_dir / "comparison.csv", index=False)
        (out_dir / "comparison.txt").write_text(self.summary() + "\n")


def _read(path: Path, label, ignore):
    return xy(pd.read_csv(path), label, ignore)


def run_comparison(
    dataset,
    plan: SplitPlan,
    model_kind: str,
    k_folds: int = 10,
    seed: int = 0,
    work_dir: Optional[Path] = None,
    label_column: str = "y",
    poll_interval: float = 0.001,
    n_trees: int = 100,
    individual: bool = True,
    sentinel: Optional[str] = None,
    smpc: bool = False,
    record_transcript: bool = False,
) -> ComparisonResult:
    if model_kind not in MODELS:
        raise ValueError(f"model_kind must be one of {sorted(MODELS)}")
    import tempfile

    work = Path(work_dir or tempfile.mkdtemp(prefix="fedmesh-cmp-"))
    df = dataset if isinstance(dataset, pd.DataFrame) else read_dataset(dataset)
    dirs = partition_dataset(df, plan, seed, work / "clients", sentinel=sentinel)
    app, eval_app, task, extra = MODELS[model_kind]
    ignore = ["record_id"] if sentinel else []
    config = SimConfig(
        data_dirs=dirs,
        steps=[
            StepSpec("cross_validation", {"k": k_folds}),
            StepSpec("normalization", {"mode": "standard"}),
            StepSpec(app, {**extra, "n_trees": n_trees} if app == "random_forest" else dict(extra)),
            StepSpec(eval_app),
        ],
        defaults={"label_column": label_column, "ignore_columns": ignore, "smpc": smpc},
        poll_interval=poll_interval,
        seed=seed,
        repetitions=1,
        work_dir=work / "runs",
        record_transcript=record_transcript,
    )
    run = run_once(config)
    if run.status != "ok":
        errors = {c: r.error for c, r in run.reports.items() if r.error}
        raise RuntimeError(f"federated run failed: {errors}")
    clients = list(run.reports)
    folds = []
    for f in range(1, k_folds + 1):
        split = f"split_{f}"
        parts = []
        for c in clients:
            cv_out = run.step_output(c, 0) / split
            Xtr, ytr = _read(cv_out / "train.csv", label_column, ignore)
            Xte, yte = _read(cv_out / "test.csv", label_column, ignore)
            pred = pd.read_csv(run.step_output(c, 2) / split / "pred.csv")["pred"].to_numpy()
            parts.append((Xtr, ytr, Xte, yte, pred))
        Xtr = np.vstack([p[0] for p in parts])
        ytr = np.concatenate([p[1] for p in parts])
        Xte = np.vstack([p[2] for p in parts])
        yte = np.concatenate([p[3] for p in parts])
        fed_pred = np.concatenate([p[4] for p in parts])

        Ztr, Zte = standardize(Xtr, Xte)
        central = fit_model(model_kind, Ztr, ytr, run.app_seed, 0, f - 1, n_trees)
        central_pred = central.predict(Zte)
        coord_out = run.step_output(clients[0], 2) / split
        fed_model = json.loads((coord_out / "model.json").read_text())["beta"] if (coord_out / "model.json").exists() else None

        result = FoldResult(f, central_pred, fed_pred, central.model, fed_model)
        result.rows.append({"fold": f, "arm": "centralized", "client": "", **score(model_kind, yte, central_pred)})
        result.rows.append({"fold": f, "arm": "federated", "client": "", **score(model_kind, yte, fed_pred)})
        if individual:
            for i, (c, (xtr, ytr_i, xte, yte_i, _)) in enumerate(zip(clients, parts)):
                ztr, zte, zall = standardize(xtr, xte, Xte)
                own = fit_model(model_kind, ztr, ytr_i, run.app_seed, i, f - 1, n_trees)
                result.rows.append({"fold": f, "arm": "individual_local", "client": c,
                                    **score(model_kind, yte_i, own.predict(zte))})
                result.rows.append({"fold": f, "arm": "individual_central", "client": c,
                                    **score(model_kind, yte, own.predict(zall))})
        folds.append(result)
    return ComparisonResult(model_kind, folds, run)
