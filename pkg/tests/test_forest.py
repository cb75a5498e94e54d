import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depthpose.forest import (Forest, ForestTrainParams, PoseForestRegressor, Tree, predict, train_forest,
                              train_tree)


def _leaf_tree(v):
    v = np.atleast_1d(np.asarray(v, dtype=float))
    return Tree(np.array([-1]), np.array([0.0]), np.array([-1]), v[None], np.array([1]))


def _route(tree, X):
    return tree.apply(X)


def test_identical_targets_single_leaf():
    X = np.random.default_rng(0).uniform(size=(50, 4))
    t = train_tree(X, np.tile([1.0, -2.0], (50, 1)), ForestTrainParams())
    assert t.n_nodes == 1 and np.array_equal(t.value[0], [1.0, -2.0])


def test_separable_clusters_depth_one():
    rng = np.random.default_rng(1)
    X = rng.uniform(size=(200, 6))
    X[:, 3] = np.where(np.arange(200) < 100, rng.uniform(0, 0.4, 200), rng.uniform(0.6, 1, 200))
    y = np.where(np.arange(200) < 100, -1.0, 3.0)
    t = train_tree(X, y, ForestTrainParams(max_depth=1, n_candidates=6, n_thresholds=20))
    assert t.feature[0] == 3 and 0.4 <= t.threshold[0] <= 0.6
    assert sorted(t.value[1:, 0]) == [-1.0, 3.0]


def test_leaf_values_are_routed_means():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(300, 8))
    Y = np.column_stack([X[:, 0] + X[:, 1] ** 2, np.sin(X[:, 2])]) + 0.1 * rng.normal(size=(300, 2))
    t = train_tree(X, Y, ForestTrainParams(max_depth=7, n_candidates=8))
    leaves = _route(t, X)
    for leaf in np.unique(leaves):
        assert np.allclose(t.value[leaf], Y[leaves == leaf].mean(axis=0), atol=1e-12)
        assert np.count_nonzero(leaves == leaf) >= 5
    assert t.depth <= 7


def test_empty_sample_set_raises():
    with pytest.raises(ValueError):
        train_tree(np.zeros((0, 3)), np.zeros((0, 2)), ForestTrainParams())
    with pytest.raises(ValueError):
        train_forest(np.zeros((0, 3)), np.zeros((0, 2)), ForestTrainParams())


def test_params_validation():
    with pytest.raises(ValueError):
        ForestTrainParams(n_trees=0)
    with pytest.raises(ValueError):
        ForestTrainParams(bagging_fraction=1.5)


def _data(seed=3, n=400):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, 10))
    Y = np.column_stack([np.sign(X[:, 0]) + X[:, 1], X[:, 2] * X[:, 3]])
    return X, Y


def test_single_tree_forest_equals_tree():
    X, Y = _data()
    p = ForestTrainParams(n_trees=1, max_depth=6, n_candidates=10, bagging_fraction=1.0)
    f = train_forest(X, Y, p)
    for row in X[:20]:
        assert np.array_equal(predict(f, lambda d, r=row: r[d]), f.trees[0].value[f.trees[0].leaf_of(lambda d, r=row: r[d])])


def test_forest_deterministic_across_workers():
    X, Y = _data()
    p = ForestTrainParams(n_trees=4, max_depth=6, n_candidates=5, seed=9)
    a, b = train_forest(X, Y, p), train_forest(X, Y, p, n_jobs=3)
    for s, t in zip(a.trees, b.trees):
        for f in ("feature", "threshold", "right", "value", "count"):
            assert np.array_equal(getattr(s, f), getattr(t, f))


def test_forest_beats_constant_mean():
    X, Y = _data()
    f = train_forest(X, Y, ForestTrainParams(n_trees=5, max_depth=8, n_candidates=10))
    P = np.array([predict(f, lambda d, r=r: r[d]) for r in X])
    assert np.mean((P - Y) ** 2) <= np.mean((Y - Y.mean(axis=0)) ** 2)


def test_deeper_never_worse_single_tree():
    X, Y = _data(seed=8)
    errs = []
    for depth in (2, 4, 8):
        t = train_tree(X, Y, ForestTrainParams(max_depth=depth, n_candidates=10, seed=1))
        errs.append(np.mean((t.value[t.apply(X)] - Y) ** 2))
    assert errs[0] >= errs[1] >= errs[2]


def test_cancellation_and_identical_trees():
    v = np.array([1.5, -2.0])
    f = Forest([_leaf_tree(v), _leaf_tree(-v)], 0, 2)
    assert np.array_equal(predict(f, lambda d: 0.0), np.zeros(2))
    X, Y = _data()
    t = train_tree(X, Y, ForestTrainParams(max_depth=5, n_candidates=10))
    same = Forest([t, t, t], 5, 2)
    for row in X[:10]:
        probe = lambda d, r=row: r[d]
        assert np.allclose(predict(same, probe), t.value[t.leaf_of(probe)], rtol=0, atol=1e-15)


def test_predict_matches_per_tree_average_and_touches_path_only():
    X, Y = _data()
    f = train_forest(X, Y, ForestTrainParams(n_trees=6, max_depth=7, n_candidates=10))
    for row in X[:25]:
        calls = []

        def probe(d, r=row):
            calls.append(d)
            return r[d]

        got = predict(f, probe)
        want = np.mean([t.value[t.leaf_of(lambda d, r=row: r[d])] for t in f.trees], axis=0)
        assert np.allclose(got, want, atol=1e-14)
        assert len(calls) <= f.n_trees * max(t.depth for t in f.trees)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 0.99), st.integers(0, 19))
def test_piecewise_constant(frac, row_index):
    X, Y = _data()
    t = train_tree(X, Y, ForestTrainParams(max_depth=5, n_candidates=10))
    row = X[row_index].copy()
    leaf = t.leaf_of(lambda d: row[d])
    for col in set(t.feature[t.feature >= 0]):
        cuts = np.sort(np.r_[-1.0, t.threshold[t.feature == col], 1.0])
        k = np.searchsorted(cuts, row[col], side="right")
        lo, hi = cuts[max(k - 1, 0)], cuts[min(k, len(cuts) - 1)]
        row[col] = lo + frac * (hi - lo) if lo < row[col] else row[col]
    assert t.leaf_of(lambda d: row[d]) == leaf


def test_flat_arrays_follow_preorder():
    X, Y = _data()
    f = train_forest(X, Y, ForestTrainParams(n_trees=3, max_depth=5, n_candidates=10))
    roots, feat, thr, right, value = f.flat
    base = 0
    for r, t in zip(roots, f.trees):
        assert r == base
        inner = t.feature >= 0
        assert np.array_equal(right[base:base + t.n_nodes][inner], t.right[inner] + base)
        base += t.n_nodes
    assert value.shape == (base, 2)


def test_estimator_wrapper():
    X, Y = _data()
    m = PoseForestRegressor(n_trees=4, max_depth=8, n_candidates=10).fit(X, Y[:, 0])
    assert m.predict(X).shape == (len(X),)
    assert m.score(X, Y[:, 0]) > 0.5
    assert m.get_params()["n_trees"] == 4
