import numpy as np
import pytest

from fedmesh.fed_ml.forest import (
    DecisionTree,
    Forest,
    ForestError,
    apportion,
    build_tree,
    forest_arrays,
    merge_forests,
    predict_forest,
    train_local_trees,
    tree_rngs,
    trees_from_arrays,
)


def leaf(value):
    return DecisionTree([-1], [0.0], [1], [0.0], [value])


def test_apportion_examples():
    assert apportion([1, 1], 100) == [50, 50]
    assert apportion([10, 90], 100) == [10, 90]
    assert apportion([1, 1, 1], 100) == [34, 33, 33]
    assert apportion([58, 87, 87, 174, 173], 100) == [10, 15, 15, 30, 30]


def test_apportion_always_sums_to_total():
    rng = np.random.default_rng(0)
    for _ in range(200):
        w = rng.integers(1, 500, size=rng.integers(1, 9))
        q = apportion(w, 100)
        assert sum(q) == 100
        assert all(abs(qi - 100 * wi / w.sum()) < 1 for qi, wi in zip(q, w))


def test_merge_quota_and_order():
    a = [leaf([1.0, 0.0])] * 100
    b = [leaf([0.0, 1.0])] * 100
    forest = merge_forests([(a, 10), (b, 90)], 100)
    assert len(forest.trees) == 100
    assert sum(t.value[0, 0] == 1.0 for t in forest.trees) == 10
    assert all(t.value[0, 1] == 1.0 for t in forest.trees[10:])
    with pytest.raises(ForestError):
        merge_forests([(a[:5], 10), (b, 90)], 100)


def test_single_class_gives_pure_leaves():
    X = np.random.default_rng(0).normal(size=(30, 3))
    trees = train_local_trees(X, np.ones(30, dtype=int), 5, rngs=tree_rngs(0, 0, 0, 5))
    assert all(t.n_nodes == 1 for t in trees)
    assert predict_forest(Forest(trees), X).tolist() == [1] * 30


def test_separable_toy_set_is_fit_exactly():
    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, size=(80, 2))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    trees = train_local_trees(X, y, 25, rngs=tree_rngs(1, 0, 0, 25))
    assert np.array_equal(predict_forest(Forest(trees), X), y)


def test_fixed_seed_is_reproducible():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(60, 5)), rng.integers(0, 2, 60)
    a = train_local_trees(X, y, 8, rngs=tree_rngs(9, 1, 2, 8))
    b = train_local_trees(X, y, 8, rngs=tree_rngs(9, 1, 2, 8))
    assert all(s.equals(t) for s, t in zip(a, b))
    c = train_local_trees(X, y, 8, rngs=tree_rngs(9, 1, 3, 8))
    assert not all(s.equals(t) for s, t in zip(a, c))


def test_vote_rules():
    ones = Forest([leaf([0.0, 1.0])] * 3)
    assert predict_forest(ones, np.zeros((4, 2))).tolist() == [1] * 4
    tie = Forest([leaf([1.0, 0.0]), leaf([0.0, 1.0])])
    assert predict_forest(tie, np.zeros((1, 2))).tolist() == [0]
    reg = Forest([leaf([2.0]), leaf([4.0])], task="regression", n_classes=1)
    assert predict_forest(reg, np.zeros((1, 2))).tolist() == [3.0]


def test_tree_traversal_by_hand():
    # root splits x0 <= 0.5; its right child splits x1 <= 2.0
    t = DecisionTree(
        feature=[0, -1, 1, -1, -1],
        threshold=[0.5, 0, 2.0, 0, 0],
        n_samples=[6, 2, 4, 1, 3],
        impurity=[0.5, 0, 0.4, 0, 0],
        value=[[0.5, 0.5], [1, 0], [0.25, 0.75], [1, 0], [0, 1]],
    )
    X = np.array([[0.0, 9.0], [1.0, 1.0], [1.0, 3.0]])
    assert t.apply(X).tolist() == [1, 3, 4]


def test_regression_tree_reduces_variance():
    rng = np.random.default_rng(3)
    X = rng.uniform(size=(100, 2))
    y = np.where(X[:, 0] > 0.5, 10.0, 0.0)
    t = build_tree(X, y, "regression", 1, 2, np.random.default_rng(0))
    np.testing.assert_allclose(t.predict_value(X)[:, 0], y)


def test_array_round_trip():
    rng = np.random.default_rng(4)
    X, y = rng.normal(size=(40, 4)), rng.integers(0, 2, 40)
    trees = train_local_trees(X, y, 4, rngs=tree_rngs(0, 0, 0, 4))
    back = trees_from_arrays(forest_arrays(trees, "t:"), "t:")
    assert all(a.equals(b) for a, b in zip(trees, back))
    assert trees_from_arrays(forest_arrays([])) == []
