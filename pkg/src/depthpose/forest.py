"""Multi-output regression forests used as the per-stage weak learner.

Trees are stored as preorder node arrays. For an internal node the left
child is the next node and ``right`` holds the right child's index; a sample
goes left when ``feature_value < threshold``. Leaves carry ``feature == -1``
and their mean target vector in ``value``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Callable, List

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted


@dataclass(frozen=True)
class ForestTrainParams:
    n_trees: int = 16
    max_depth: int = 15
    n_candidates: int = 200
    n_thresholds: int = 10
    min_samples_leaf: int = 5
    bagging_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        for name in ("n_trees", "max_depth", "n_candidates", "n_thresholds", "min_samples_leaf"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.bagging_fraction <= 1.0:
            raise ValueError("bagging_fraction must be in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Tree:
    feature: np.ndarray    # (n_nodes,) int64, -1 for leaves
    threshold: np.ndarray  # (n_nodes,) float64
    right: np.ndarray      # (n_nodes,) int64, -1 for leaves
    value: np.ndarray      # (n_nodes, k) leaf means, zero rows for internal nodes
    count: np.ndarray      # (n_nodes,) samples that reached the node

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[i + 1] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def leaf_of(self, probe: Callable[[int], float]) -> int:
        node = 0
        while self.feature[node] >= 0:
            node = node + 1 if probe(int(self.feature[node])) < self.threshold[node] else int(self.right[node])
        return node

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index per row of a dense feature matrix."""
        return np.array([self.leaf_of(lambda d, row=row: row[d]) for row in X], dtype=np.int64)


@dataclass
class Forest:
    trees: List[Tree]
    max_depth: int
    n_outputs: int

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @cached_property
    def flat(self):
        """Concatenated node arrays plus per-tree root offsets, for the kernels."""
        roots, base = [], 0
        for t in self.trees:
            roots.append(base)
            base += t.n_nodes
        shift = np.concatenate([np.where(t.right >= 0, t.right + r, -1) for t, r in zip(self.trees, roots)])
        return (np.array(roots, dtype=np.int64),
                np.concatenate([t.feature for t in self.trees]),
                np.concatenate([t.threshold for t in self.trees]),
                shift.astype(np.int64),
                np.ascontiguousarray(np.concatenate([t.value for t in self.trees]).reshape(-1, self.n_outputs)))

    def used_features(self) -> np.ndarray:
        return np.unique(np.concatenate([t.feature[t.feature >= 0] for t in self.trees] + [np.zeros(0, np.int64)]))


class _Dense:
    def __init__(self, X):
        self.X = X
        self.shape = X.shape

    def take(self, rows, cols):
        return self.X[np.ix_(rows, cols)]


def _as_source(features):
    if hasattr(features, "take") and not isinstance(features, np.ndarray):
        return features
    X = np.asarray(features, dtype=float)
    if X.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    return _Dense(X)


def _best_split(F, Y, thresholds, min_leaf):
    m = F.shape[0]
    c, t = thresholds.shape
    mask = F[:, :, None] < thresholds[None]
    n_left = mask.sum(axis=0).reshape(-1).astype(float)
    S_left = mask.reshape(m, c * t).T.astype(float) @ Y
    S = Y.sum(axis=0)
    S_right = S - S_left
    n_right = m - n_left
    ok = (n_left >= min_leaf) & (n_right >= min_leaf)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = (np.einsum("ij,ij->i", S_left, S_left) / n_left
                + np.einsum("ij,ij->i", S_right, S_right) / n_right - S @ S / m)
    gain = np.where(ok & np.isfinite(thresholds.reshape(-1)), gain, -np.inf)
    best = int(np.argmax(gain))
    return best // t, best % t, gain[best]


def train_tree(features, targets, params: ForestTrainParams, rng=None, rows=None) -> Tree:
    """Greedy top-down multi-output regression tree.

    Each node scores ``n_candidates`` random feature columns with
    ``n_thresholds`` thresholds drawn uniformly between the column's min and
    max over the node's samples, keeping the split with the largest drop in
    summed squared deviation of the target vectors.
    """
    X = _as_source(features)
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    rows = np.arange(Y.shape[0]) if rows is None else np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("cannot train a tree on an empty sample set")
    if X.shape[0] != Y.shape[0]:
        raise ValueError("features and targets disagree on the sample count")
    rng = np.random.default_rng(params.seed) if rng is None else rng
    n_features = X.shape[1]
    k = Y.shape[1]

    feature, threshold, right, value, count = [], [], [], [], []

    def grow(idx, depth):
        node = len(feature)
        Yn = Y[idx]
        feature.append(-1)
        threshold.append(0.0)
        right.append(-1)
        value.append(np.zeros(k))
        count.append(len(idx))
        split = None
        if depth < params.max_depth and len(idx) >= 2 * params.min_samples_leaf \
                and n_features > 0 and not np.all(Yn == Yn[0]):
            cand = rng.choice(n_features, size=min(params.n_candidates, n_features), replace=False)
            F = X.take(idx, cand)
            lo, hi = F.min(axis=0), F.max(axis=0)
            u = rng.uniform(size=(len(cand), params.n_thresholds))
            thr = lo[:, None] + (hi - lo)[:, None] * u
            thr[~(hi > lo)] = np.nan
            ci, ti, gain = _best_split(F, Yn - Yn.mean(axis=0), thr, params.min_samples_leaf)
            if gain > 0:
                split = (int(cand[ci]), float(thr[ci, ti]), F[:, ci] < thr[ci, ti])
        if split is None:
            value[node] = Yn.mean(axis=0)
            return
        f, th, go_left = split
        feature[node] = f
        threshold[node] = th
        grow(idx[go_left], depth + 1)
        right[node] = len(feature)
        grow(idx[~go_left], depth + 1)

    grow(rows, 0)
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=float),
                np.array(right, dtype=np.int64), np.array(value, dtype=float).reshape(-1, k),
                np.array(count, dtype=np.int64))


def tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(tree_index,)))


def train_forest(features, targets, params: ForestTrainParams, n_jobs: int = 1) -> Forest:
    """Trees on independent sample subsets (drawn without replacement) with
    independent candidate pools; tree ``t`` uses the stream (seed, t)."""
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = Y.shape[0]
    if n == 0:
        raise ValueError("cannot train a forest on an empty sample set")
    X = _as_source(features)
    n_sub = max(1, int(round(params.bagging_fraction * n)))

    def one(t):
        rng = tree_rng(params.seed, t)
        rows = np.sort(rng.choice(n, size=n_sub, replace=False))
        return train_tree(X, Y, params, rng=rng, rows=rows)

    if n_jobs == 1:
        trees = [one(t) for t in range(params.n_trees)]
    else:
        trees = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(one)(t) for t in range(params.n_trees))
    return Forest(trees, params.max_depth, Y.shape[1])


def predict(forest: Forest, probe: Callable[[int], float]) -> np.ndarray:
    """Mean of the trees' leaf vectors; ``probe(d)`` yields descriptor d's value
    and is only called along traversed paths."""
    acc = np.zeros(forest.n_outputs)
    for tree in forest.trees:
        acc += tree.value[tree.leaf_of(probe)]
    return acc / forest.n_trees


class PoseForestRegressor(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`train_forest` for dense feature matrices."""

    def __init__(self, n_trees=16, max_depth=15, n_candidates=200, n_thresholds=10,
                 min_samples_leaf=5, bagging_fraction=0.8, random_state=0, n_jobs=1):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.n_candidates = n_candidates
        self.n_thresholds = n_thresholds
        self.min_samples_leaf = min_samples_leaf
        self.bagging_fraction = bagging_fraction
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _params(self) -> ForestTrainParams:
        return ForestTrainParams(self.n_trees, self.max_depth, self.n_candidates, self.n_thresholds,
                                 self.min_samples_leaf, self.bagging_fraction, int(self.random_state))

    def fit(self, X, y):
        X = check_array(X)
        y = np.asarray(y, dtype=float)
        self._single_output = y.ndim == 1
        self.forest_ = train_forest(X, y, self._params(), n_jobs=self.n_jobs)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "forest_")
        X = check_array(X)
        out = np.array([predict(self.forest_, lambda d, row=row: row[d]) for row in X])
        return out[:, 0] if self._single_output else out
