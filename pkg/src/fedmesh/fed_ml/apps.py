"""Workflow apps: cross-validation, normalization, linear and logistic
regression, random forest, classifier and regression evaluation.

Common config keys: ``label_column`` (default: last column),
``ignore_columns`` (non-feature columns carried along untouched),
``seed`` and ``smpc`` (secure summation for the regressions).
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np
import pandas as pd

from .. import payload, smpc
from ..app_engine import FederatedApp, register_app
from . import evaluation as ev
from .cv import kfold_split
from .data import Split, add_intercept, feature_columns, find_data_file, label_of, list_splits, read_table, write_table, xy
from .forest import TASKS, Forest, apportion, forest_arrays, merge_forests, predict_forest, train_local_trees, tree_rngs, trees_from_arrays
from .linreg import aggregate_linreg, local_linreg_stats
from .logreg import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    GradientHessian,
    aggregate_logreg_step,
    local_logreg_step,
    quantization_tolerance,
)
from .normalization import Moments, ScalingParams, aggregate_norm, apply_scaling, fed_normalize_stats


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


class TabularApp(FederatedApp):
    @property
    def label_column(self):
        return self.config.get("label_column")

    @property
    def ignore(self) -> list[str]:
        return list(self.config.get("ignore_columns", []))

    @property
    def seed(self) -> int:
        return int(self.config.get("seed", 0))

    @property
    def client_index(self) -> int:
        return self.clients.index(self.id)

    def load(self, path: Path) -> tuple[pd.DataFrame, np.ndarray, np.ndarray]:
        df = read_table(path)
        X, y = xy(df, self.label_column, self.ignore)
        return df, X, y

    def copy_test(self, split: Split) -> None:
        if split.test is not None:
            shutil.copyfile(split.test, split.out_dir(self.output_dir) / "test.csv")


@register_app("cross_validation")
class CrossValidationApp(TabularApp):
    """Local k-fold splits; nothing is exchanged."""

    def run(self):
        src = find_data_file(self.input_dir)
        df = read_table(src)
        k = int(self.config.get("k", 10))
        seed = np.random.SeedSequence([self.seed, self.client_index])
        folds = kfold_split(len(df), k, seed)
        for i, (train, test) in enumerate(folds, start=1):
            out = self.output_dir / f"split_{i}"
            write_table(df.iloc[train], out / "train.csv")
            write_table(df.iloc[test], out / "test.csv")
        self.log("wrote %d folds from %s (%d rows)", k, src.name, len(df))
        yield from ()


@register_app("normalization")
class NormalizationApp(TabularApp):
    def run(self):
        mode = self.config.get("mode", "standard")
        splits = list_splits(self.input_dir)
        frames, cols, arrays = [], None, {}
        for j, s in enumerate(splits):
            df = read_table(s.train)
            cols = feature_columns(df, self.label_column, self.ignore)
            m = fed_normalize_stats(df[cols].to_numpy(dtype=np.float64))
            frames.append(df)
            arrays.update(
                {
                    f"s{j}_n": np.array([m.n], dtype="<i8"),
                    f"s{j}_total": m.total,
                    f"s{j}_sumsq": m.sumsq,
                    f"s{j}_m2": m.m2,
                    f"s{j}_min": m.min,
                    f"s{j}_max": m.max,
                    f"s{j}_maxabs": m.maxabs,
                }
            )
        parts = yield from self.gather(payload.pack("norm_moments", arrays, splits=len(splits), mode=mode))
        if self.master:
            out = {}
            for j in range(len(splits)):
                moments = []
                for raw in parts:
                    msg = payload.unpack(raw, "norm_moments")
                    if msg.fields["splits"] != len(splits):
                        raise ValueError("clients disagree on the number of splits")
                    a = msg.arrays
                    moments.append(
                        Moments(int(a[f"s{j}_n"][0]), a[f"s{j}_total"], a[f"s{j}_sumsq"], a[f"s{j}_m2"],
                                a[f"s{j}_min"], a[f"s{j}_max"], a[f"s{j}_maxabs"])
                    )
                p = aggregate_norm(moments, mode, cols)
                for w in p.warnings:
                    self.warn(w)
                out.update({f"s{j}_center": p.center, f"s{j}_scale": p.scale,
                            f"s{j}_flat": p.passthrough.astype("|u1")})
            glob = yield from self.broadcast(payload.pack("norm_params", out, mode=mode))
        else:
            glob = yield from self.broadcast(None)
        msg = payload.unpack(glob, "norm_params")
        summary = {}
        for j, (s, df) in enumerate(zip(splits, frames)):
            a = msg.arrays
            params = ScalingParams(mode, a[f"s{j}_center"], a[f"s{j}_scale"], a[f"s{j}_flat"].astype(bool))
            if not self.master and params.passthrough.any():
                self.warn("features %s have zero spread; left unscaled",
                          [c for c, f in zip(cols, params.passthrough) if f])
            dst = s.out_dir(self.output_dir)
            for src, name in ((s.train, "train.csv"), (s.test, "test.csv")):
                if src is None:
                    continue
                frame = df if src == s.train else read_table(src)
                frame = frame.copy()
                frame[cols] = apply_scaling(frame[cols].to_numpy(dtype=np.float64), params)
                write_table(frame, dst / name)
            summary[s.name or "data"] = {
                "features": cols,
                "center": params.center.tolist(),
                "scale": params.scale.tolist(),
                "unscaled": [c for c, f in zip(cols, params.passthrough) if f],
            }
        (self.output_dir / "scaling.json").write_text(_json({"mode": mode, "splits": summary}))


class _RegressionBase(TabularApp):
    def load_splits(self):
        data = []
        for s in list_splits(self.input_dir):
            df, X, y = self.load(s.train)
            cols = feature_columns(df, self.label_column, self.ignore)
            data.append((s, add_intercept(X), y, cols))
        return data

    def write_model(self, s: Split, beta: np.ndarray, cols: list[str], extra: dict, proba: bool) -> None:
        dst = s.out_dir(self.output_dir)
        dst.mkdir(parents=True, exist_ok=True)
        model = {"app": self.app_name, "intercept": True, "features": cols, "beta": beta.tolist(), **extra}
        (dst / "model.json").write_text(_json(model))
        if s.test is not None:
            _, Xt, _ = self.load(s.test)
            z = add_intercept(Xt) @ beta
            if proba:
                pd.DataFrame({"pred": (z > 0).astype(np.int64), "score": z}).to_csv(dst / "pred.csv", index=False, float_format="%.17g")
            else:
                pd.DataFrame({"pred": z}).to_csv(dst / "pred.csv", index=False, float_format="%.17g")
            self.copy_test(s)


@register_app("linear_regression")
class LinearRegressionApp(_RegressionBase):
    def run(self):
        data = self.load_splits()
        stats = [local_linreg_stats(X, y) for _, X, y, _ in data]
        d = data[0][1].shape[1]
        if self.smpc_enabled:
            vec = np.concatenate([np.concatenate([A.ravel(), b, [n]]) for A, b, n in stats])
            total = yield from self.secure_sum(vec)
            if self.master:
                width = d * d + d + 1
                summed = []
                for j in range(len(data)):
                    block = total[j * width : (j + 1) * width]
                    summed.append([(block[: d * d].reshape(d, d), block[d * d : d * d + d], int(round(block[-1])))])
        else:
            arrays = {}
            for j, (A, b, n) in enumerate(stats):
                arrays[f"s{j}_XtX"] = A
                arrays[f"s{j}_Xty"] = b
            parts = yield from self.gather(
                payload.pack("linreg_stats", arrays, dim=d, n=[n for _, _, n in stats], splits=len(data))
            )
            if self.master:
                msgs = [payload.unpack(p, "linreg_stats") for p in parts]
                summed = [[(m.arrays[f"s{j}_XtX"], m.arrays[f"s{j}_Xty"], m.fields["n"][j]) for m in msgs]
                          for j in range(len(data))]
        if self.master:
            betas = {f"s{j}_beta": aggregate_linreg(summed[j], ["intercept"] + data[j][3]) for j in range(len(data))}
            glob = yield from self.broadcast(payload.pack("linreg_model", betas, dim=d))
        else:
            glob = yield from self.broadcast(None)
        msg = payload.unpack(glob, "linreg_model")
        for j, (s, _, _, cols) in enumerate(data):
            self.write_model(s, msg.arrays[f"s{j}_beta"], cols, {}, proba=False)


@register_app("logistic_regression")
class LogisticRegressionApp(_RegressionBase):
    def run(self):
        data = self.load_splits()
        tol = float(self.config.get("tol", DEFAULT_TOL))
        max_iter = int(self.config.get("max_iter", DEFAULT_MAX_ITER))
        d = data[0][1].shape[1]
        S = len(data)
        betas = [np.zeros(d) for _ in range(S)]
        active = list(range(S))
        iterations = [0] * S
        rnd = 0
        while active:
            parts = {j: local_logreg_step(data[j][1], data[j][2], betas[j]) for j in active}
            if self.smpc_enabled:
                vec = np.concatenate([np.concatenate([parts[j].g, parts[j].H.ravel()]) for j in active])
                total = yield from self.secure_sum(vec)
                if self.master:
                    width = d + d * d
                    summed = {}
                    for i, j in enumerate(active):
                        block = total[i * width : (i + 1) * width]
                        summed[j] = [GradientHessian(block[:d], block[d:].reshape(d, d), 0)]
            else:
                arrays = {}
                for j in active:
                    arrays[f"s{j}_g"] = parts[j].g
                    arrays[f"s{j}_H"] = parts[j].H
                got = yield from self.gather(
                    payload.pack("logreg_step", arrays, round=rnd, dim=d, splits=active,
                                 n=[parts[j].n_local for j in active])
                )
                if self.master:
                    msgs = [payload.unpack(p, "logreg_step") for p in got]
                    for m in msgs:
                        if m.fields["round"] != rnd or m.fields["splits"] != active:
                            raise ValueError(f"out-of-step logistic regression packet (round {m.fields['round']})")
                    summed = {j: [GradientHessian(m.arrays[f"s{j}_g"], m.arrays[f"s{j}_H"], 0) for m in msgs]
                              for j in active}
            if self.master:
                out, still = {}, []
                for j in active:
                    step_tol = tol
                    if self.smpc_enabled:
                        # masked sums carry fixed-point rounding; do not chase it
                        H = summed[j][0].H
                        step_tol = max(tol, quantization_tolerance(H, len(self.clients), smpc.SCALE_EXPONENT))
                    new, done = aggregate_logreg_step(summed[j], betas[j], rnd, step_tol, max_iter)
                    out[f"s{j}_beta"] = new
                    if not done:
                        still.append(j)
                glob = yield from self.broadcast(payload.pack("logreg_beta", out, round=rnd, active=still))
            else:
                glob = yield from self.broadcast(None)
            msg = payload.unpack(glob, "logreg_beta")
            if msg.fields["round"] != rnd:
                raise ValueError("out-of-step coefficient broadcast")
            for j in active:
                betas[j] = msg.arrays[f"s{j}_beta"]
                iterations[j] = rnd + 1
            active = list(msg.fields["active"])
            rnd += 1
        self.log("converged after %d rounds", rnd)
        for j, (s, _, _, cols) in enumerate(data):
            self.write_model(s, betas[j], cols, {"iterations": iterations[j]}, proba=True)


@register_app("random_forest")
class RandomForestApp(TabularApp):
    """Three exchanges: sample census, tree upload/merge, pooled evaluation."""

    def run(self):
        task = self.config.get("task", "classification")
        if task not in TASKS:
            raise ValueError(f"unknown random forest task {task!r}")
        if self.smpc_enabled:
            self.warn("smpc is not applicable to tree exchange; ignoring the flag")
        n_trees = int(self.config.get("n_trees", 100))
        splits = list_splits(self.input_dir)
        data = [self.load(s.train)[1:] for s in splits]
        max_label = max(int(np.max(y)) for _, y in data) if task == "classification" else 0

        # 1) census
        census = payload.pack("rf", phase="census", n=[int(X.shape[0]) for X, _ in data], max_label=max_label)
        parts = yield from self.gather(census)
        if self.master:
            msgs = [payload.unpack(p, "rf") for p in parts]
            sizes = [[m.fields["n"][j] for m in msgs] for j in range(len(splits))]
            quotas = [apportion(s, n_trees) for s in sizes]
            n_classes = max(m.fields["max_label"] for m in msgs) + 1 if task == "classification" else 1
            glob = yield from self.broadcast(
                payload.pack("rf", phase="quota", quotas=quotas, totals=[sum(s) for s in sizes], n_classes=n_classes)
            )
        else:
            glob = yield from self.broadcast(None)
        plan = payload.unpack(glob, "rf")
        n_classes = plan.fields["n_classes"]
        me = self.client_index

        # 2) local trees -> merged forest
        arrays = {}
        for j, (X, y) in enumerate(data):
            count = plan.fields["quotas"][j][me]
            trees = train_local_trees(X, y, count, task, n_classes, tree_rngs(self.seed, me, j, count))
            arrays.update(forest_arrays(trees, f"s{j}_"))
        parts = yield from self.gather(payload.pack("rf", arrays, phase="trees", splits=len(splits)))
        if self.master:
            merged = {}
            for j in range(len(splits)):
                locals_ = []
                for i, raw in enumerate(parts):
                    msg = payload.unpack(raw, "rf")
                    locals_.append((trees_from_arrays(msg.arrays, f"s{j}_"), sizes[j][i]))
                forest = merge_forests(locals_, n_trees, task, n_classes)
                merged.update(forest_arrays(forest.trees, f"s{j}_"))
            glob = yield from self.broadcast(payload.pack("rf", merged, phase="forest", task=task, n_classes=n_classes))
        else:
            glob = yield from self.broadcast(None)
        fmsg = payload.unpack(glob, "rf")
        forests = [Forest(trees_from_arrays(fmsg.arrays, f"s{j}_"), task, n_classes, n_trees) for j in range(len(splits))]

        # 3) evaluate the merged forest on local data and pool the results
        local_eval = {}
        for j, (s, forest) in enumerate(zip(splits, forests)):
            dst = s.out_dir(self.output_dir)
            dst.mkdir(parents=True, exist_ok=True)
            part = payload.pack("rf", forest_arrays(forest.trees), phase="model", task=task, n_classes=n_classes)
            (dst / "forest.fmp").write_bytes(part)
            if s.test is not None:
                _, Xe, ye = self.load(s.test)
                pred = predict_forest(forest, Xe)
                pd.DataFrame({"pred": pred}).to_csv(dst / "pred.csv", index=False, float_format="%.17g")
                self.copy_test(s)
            else:
                Xe, ye = data[j]
                pred = predict_forest(forest, Xe)
            if task == "classification":
                c = ev.ConfusionCounts.from_predictions(ye, pred) if n_classes == 2 else None
                correct = int(np.sum(pred == ye))
                local_eval[f"s{j}_eval"] = np.array(
                    [correct, len(ye)] + ([c.tp, c.fp, c.tn, c.fn] if c else []), dtype="<i8"
                )
            else:
                local_eval[f"s{j}_abs"] = np.sort(np.abs(ye - pred))
        parts = yield from self.gather(payload.pack("rf", local_eval, phase="eval"))
        if self.master:
            report = {}
            for j, s in enumerate(splits):
                msgs = [payload.unpack(p, "rf") for p in parts]
                if task == "classification":
                    rows = [m.arrays[f"s{j}_eval"] for m in msgs]
                    entry = {"accuracy": sum(int(r[0]) for r in rows) / sum(int(r[1]) for r in rows)}
                    if n_classes == 2:
                        entry.update(ev.aggregate_evaluation([ev.ConfusionCounts(*map(int, r[2:6])) for r in rows]))
                else:
                    entry = ev.regression_metrics_from_abs(np.concatenate([m.arrays[f"s{j}_abs"] for m in msgs]))
                report[s.name or "data"] = entry
            glob = yield from self.broadcast(payload.pack("rf", phase="summary", report=report))
        else:
            glob = yield from self.broadcast(None)
        summary = payload.unpack(glob, "rf").fields["report"]
        (self.output_dir / "rf_summary.json").write_text(_json(summary))


class _EvaluationBase(TabularApp):
    task = "classification"

    def local(self, s: Split):
        if s.test is None:
            raise FileNotFoundError(f"no test.csv for {s.name or self.input_dir}")
        df = read_table(s.test)
        y = df[label_of(df, self.label_column)].to_numpy()
        pred_path = s.test.parent / "pred.csv"
        pred = read_table(pred_path)["pred"].to_numpy()
        if len(pred) != len(y):
            raise ValueError(f"{pred_path} has {len(pred)} rows, test set has {len(y)}")
        return y, pred

    def summarize(self, per_split: dict) -> dict:
        keys = [k for k, v in next(iter(per_split.values())).items() if isinstance(v, float)]
        mean = {k: float(np.mean([m[k] for m in per_split.values()])) for k in keys}
        std = {k: float(np.std([m[k] for m in per_split.values()])) for k in keys}
        return {"task": self.task, "splits": per_split, "mean": mean, "std": std}

    def finish(self, report: dict) -> None:
        (self.output_dir / "evaluation.json").write_text(_json(report))
        rows = [{"split": name, **{k: v for k, v in m.items() if not isinstance(v, list)}} for name, m in report["splits"].items()]
        pd.DataFrame(rows).to_csv(self.output_dir / "evaluation.csv", index=False, float_format="%.17g")


@register_app("classifier_evaluation")
class ClassifierEvaluationApp(_EvaluationBase):
    task = "classification"

    def run(self):
        splits = list_splits(self.input_dir)
        counts = []
        for s in splits:
            y, pred = self.local(s)
            c = ev.ConfusionCounts.from_predictions(y, pred)
            counts.append([c.tp, c.fp, c.tn, c.fn])
        parts = yield from self.gather(payload.pack("eval", {"counts": np.array(counts, dtype="<i8")}, task=self.task))
        if self.master:
            per_split = {}
            for j, s in enumerate(splits):
                locals_ = []
                for raw in parts:
                    msg = payload.unpack(raw, "eval")
                    if msg.fields["task"] != self.task:
                        raise ValueError("mixed evaluation tasks")
                    locals_.append(ev.ConfusionCounts(*map(int, msg.arrays["counts"][j])))
                per_split[s.name or "data"] = ev.aggregate_evaluation(locals_)
            glob = yield from self.broadcast(payload.pack("eval_report", report=self.summarize(per_split)))
        else:
            glob = yield from self.broadcast(None)
        self.finish(payload.unpack(glob, "eval_report").fields["report"])


@register_app("regression_evaluation")
class RegressionEvaluationApp(_EvaluationBase):
    task = "regression"

    def run(self):
        splits = list_splits(self.input_dir)
        arrays = {}
        for j, s in enumerate(splits):
            y, pred = self.local(s)
            arrays[f"s{j}_abs"] = ev.ResidualSummary.from_residuals(y.astype(float) - pred.astype(float)).abs_residuals
        parts = yield from self.gather(payload.pack("eval", arrays, task=self.task))
        if self.master:
            per_split = {}
            for j, s in enumerate(splits):
                locals_ = []
                for raw in parts:
                    msg = payload.unpack(raw, "eval")
                    if msg.fields["task"] != self.task:
                        raise ValueError("mixed evaluation tasks")
                    locals_.append(ev.ResidualSummary.from_residuals(msg.arrays[f"s{j}_abs"]))
                per_split[s.name or "data"] = ev.aggregate_evaluation(locals_)
            glob = yield from self.broadcast(payload.pack("eval_report", report=self.summarize(per_split)))
        else:
            glob = yield from self.broadcast(None)
        self.finish(payload.unpack(glob, "eval_report").fields["report"])
