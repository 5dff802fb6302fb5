"""CART trees, local random forests and their federated merge.

Trees are stored as flat arrays in pre-order: node ``i``'s left child is
``i + 1`` and a leaf has ``feature == -1``. This is also the wire format
(see :func:`forest_arrays`), so a serialized tree is exactly what the
coordinator merges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

TASKS = ("classification", "regression")


class ForestError(ValueError):
    pass


def apportion(weights: Sequence[float], total: int) -> list[int]:
    """Largest-remainder apportionment of ``total`` units by ``weights``.

    Leftover units go to the largest fractional remainders; equal
    remainders go to the lower index.
    """
    w = [float(x) for x in weights]
    if any(x < 0 for x in w) or sum(w) <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    s = sum(w)
    quotas = [total * x / s for x in w]
    base = [math.floor(q) for q in quotas]
    left = total - sum(base)
    order = sorted(range(len(w)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base


@dataclass
class DecisionTree:
    feature: np.ndarray  # int32, -1 marks a leaf
    threshold: np.ndarray
    n_samples: np.ndarray
    impurity: np.ndarray
    value: np.ndarray  # (n_nodes, n_outputs): class probabilities or the mean
    right: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.feature = np.asarray(self.feature, dtype=np.int32)
        self.threshold = np.asarray(self.threshold, dtype=np.float64)
        self.n_samples = np.asarray(self.n_samples, dtype=np.int64)
        self.impurity = np.asarray(self.impurity, dtype=np.float64)
        self.value = np.asarray(self.value, dtype=np.float64).reshape(len(self.feature), -1)
        self.right = _right_children(self.feature)

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        active = self.feature[node] >= 0
        while active.any():
            r = rows[active]
            nd = node[active]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, nd + 1, self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict_value(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def equals(self, other: "DecisionTree") -> bool:
        return all(
            np.array_equal(getattr(self, a), getattr(other, a))
            for a in ("feature", "threshold", "n_samples", "impurity", "value")
        )


def _right_children(feature: np.ndarray) -> np.ndarray:
    n = len(feature)
    right = np.full(n, -1, dtype=np.int64)
    stack: list[int] = []
    for i in range(n - 1, -1, -1):
        if feature[i] >= 0:
            if len(stack) < 2 or stack[-1] != i + 1:
                raise ForestError("malformed pre-order tree encoding")
            stack.pop()
            right[i] = stack.pop()
        stack.append(i)
    if n and stack != [0]:
        raise ForestError("malformed pre-order tree encoding")
    return right


def _node_stats(y: np.ndarray, task: str, n_classes: int) -> tuple[np.ndarray, float]:
    if task == "classification":
        p = np.bincount(y, minlength=n_classes) / y.shape[0]
        return p, float(1.0 - np.sum(p * p))
    mean = float(np.mean(y))
    return np.array([mean]), float(np.mean((y - mean) ** 2))


def _best_split(Xn, yn, task, n_classes, max_features, rng):
    m, p = Xn.shape
    const = Xn.max(axis=0) == Xn.min(axis=0)
    perm = rng.permutation(p)
    cand = perm[~const[perm]][:max_features]
    if cand.size == 0:
        return None
    Xc = Xn[:, cand]
    order = np.argsort(Xc, axis=0, kind="stable")
    xs = np.take_along_axis(Xc, order, axis=0)
    ys = yn[order]
    n_left = np.arange(1, m, dtype=np.float64)[:, None]
    n_right = m - n_left
    if task == "classification":
        onehot = ys[..., None] == np.arange(n_classes)
        left = np.cumsum(onehot, axis=0, dtype=np.float64)
        total = left[-1]
        left = left[:-1]
        right = total - left
        score = (left * left).sum(-1) / n_left + (right * right).sum(-1) / n_right
    else:
        csum = np.cumsum(ys, axis=0)
        total = csum[-1]
        left = csum[:-1]
        score = left * left / n_left + (total - left) ** 2 / n_right
    valid = xs[1:] > xs[:-1]
    score = np.where(valid, score, -np.inf)
    flat = np.argmax(score.T)
    f, j = divmod(int(flat), m - 1)
    if not np.isfinite(score[j, f]):
        return None
    lo, hi = xs[j, f], xs[j + 1, f]
    thr = lo + (hi - lo) / 2.0
    if thr >= hi or thr < lo:
        thr = lo
    return int(cand[f]), float(thr)


def build_tree(
    X: np.ndarray,
    y: np.ndarray,
    task: str = "classification",
    n_classes: int = 2,
    max_features: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> DecisionTree:
    """Grow an unpruned CART tree (Gini for classification, variance for
    regression) with ``max_features`` candidates drawn per node."""
    if task not in TASKS:
        raise ForestError(f"unknown task {task!r}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    y = y.astype(np.int64) if task == "classification" else y.astype(np.float64)
    if X.shape[0] == 0:
        raise ForestError("cannot grow a tree on empty data")
    rng = rng if rng is not None else np.random.default_rng()
    k = max_features or max(1, math.ceil(math.sqrt(X.shape[1])))
    feats, thrs, counts, imps, values = [], [], [], [], []
    stack = [np.arange(X.shape[0])]
    while stack:
        idx = stack.pop()
        yn = y[idx]
        value, imp = _node_stats(yn, task, n_classes)
        split = None
        if idx.shape[0] >= 2 and np.ptp(yn) > 0:
            split = _best_split(X[idx], yn, task, n_classes, k, rng)
        counts.append(idx.shape[0])
        imps.append(imp)
        values.append(value)
        if split is None:
            feats.append(-1)
            thrs.append(0.0)
            continue
        f, thr = split
        feats.append(f)
        thrs.append(thr)
        go_left = X[idx, f] <= thr
        stack.append(idx[~go_left])
        stack.append(idx[go_left])
    return DecisionTree(np.array(feats), np.array(thrs), np.array(counts), np.array(imps), np.array(values))


def tree_rngs(seed: int, client_index: int, split_index: int, n_trees: int) -> list[np.random.Generator]:
    """Independent per-tree streams for one (client, split)."""
    ss = np.random.SeedSequence([int(seed), int(client_index), int(split_index)])
    return [np.random.default_rng(s) for s in ss.spawn(n_trees)]


def train_local_trees(
    X: np.ndarray,
    y: np.ndarray,
    n_trees: int,
    task: str = "classification",
    n_classes: int = 2,
    rngs: Optional[Sequence[np.random.Generator]] = None,
    max_features: Optional[int] = None,
) -> list[DecisionTree]:
    if n_trees < 0:
        raise ForestError("n_trees must be non-negative")
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ForestError("cannot train trees on empty data")
    if rngs is None:
        rngs = np.random.default_rng().spawn(n_trees)
    if len(rngs) < n_trees:
        raise ForestError("one random stream per tree is required")
    trees = []
    for t in range(n_trees):
        rng = rngs[t]
        boot = rng.integers(0, n, size=n)
        trees.append(build_tree(X[boot], np.asarray(y)[boot], task, n_classes, max_features, rng))
    return trees


@dataclass
class Forest:
    trees: list[DecisionTree]
    task: str = "classification"
    n_classes: int = 2
    target_size: int = 100


def merge_forests(
    locals_: Sequence[tuple[Sequence[DecisionTree], int]],
    target_size: int = 100,
    task: str = "classification",
    n_classes: int = 2,
) -> Forest:
    weights = [n for _, n in locals_]
    if sum(weights) <= 0:
        raise ForestError("no samples across participants")
    quota = apportion(weights, target_size)
    merged: list[DecisionTree] = []
    for i, ((trees, _), c) in enumerate(zip(locals_, quota)):
        if len(trees) < c:
            raise ForestError(f"participant #{i} owes {c} trees but supplied {len(trees)}")
        merged.extend(list(trees)[:c])
    return Forest(merged, task, n_classes, target_size)


def predict_forest(forest: Forest, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if not forest.trees:
        raise ForestError("empty forest")
    if forest.task == "regression":
        return np.mean([t.predict_value(X)[:, 0] for t in forest.trees], axis=0)
    votes = np.zeros((X.shape[0], forest.n_classes), dtype=np.int64)
    rows = np.arange(X.shape[0])
    for t in forest.trees:
        votes[rows, np.argmax(t.predict_value(X), axis=1)] += 1
    return np.argmax(votes, axis=1)


def forest_arrays(trees: Sequence[DecisionTree], prefix: str = "") -> dict[str, np.ndarray]:
    """Concatenate trees into the flat arrays carried in payloads."""
    if not trees:
        n_out = 1
        return {
            prefix + "sizes": np.zeros(0, dtype="<i8"),
            prefix + "feature": np.zeros(0, dtype="<i4"),
            prefix + "threshold": np.zeros(0, dtype="<f8"),
            prefix + "n_samples": np.zeros(0, dtype="<i8"),
            prefix + "impurity": np.zeros(0, dtype="<f8"),
            prefix + "value": np.zeros((0, n_out), dtype="<f8"),
        }
    return {
        prefix + "sizes": np.array([t.n_nodes for t in trees], dtype="<i8"),
        prefix + "feature": np.concatenate([t.feature for t in trees]).astype("<i4"),
        prefix + "threshold": np.concatenate([t.threshold for t in trees]).astype("<f8"),
        prefix + "n_samples": np.concatenate([t.n_samples for t in trees]).astype("<i8"),
        prefix + "impurity": np.concatenate([t.impurity for t in trees]).astype("<f8"),
        prefix + "value": np.concatenate([t.value for t in trees]).astype("<f8"),
    }


def trees_from_arrays(arrays: dict[str, np.ndarray], prefix: str = "") -> list[DecisionTree]:
    sizes = arrays[prefix + "sizes"]
    bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    out = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        out.append(
            DecisionTree(
                arrays[prefix + "feature"][a:b],
                arrays[prefix + "threshold"][a:b],
                arrays[prefix + "n_samples"][a:b],
                arrays[prefix + "impurity"][a:b],
                arrays[prefix + "value"][a:b],
            )
        )
    return out
