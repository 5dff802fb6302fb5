from __future__ import annotations

import numpy as np


def kfold_split(n_local: int, k: int, seed) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold split of ``range(n_local)``.

    The first ``n_local % k`` folds get one extra test index, so fold sizes
    differ by at most one.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if n_local < k:
        raise ValueError(f"cannot split {n_local} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n_local)
    sizes = np.full(k, n_local // k)
    sizes[: n_local % k] += 1
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    folds = []
    for i in range(k):
        test = np.sort(perm[bounds[i] : bounds[i + 1]])
        train = np.sort(np.concatenate([perm[: bounds[i]], perm[bounds[i + 1] :]]))
        folds.append((train, test))
    return folds
