"""Regression trees, bagged ensembles, LOO point prediction, quantile forest.

Trees are grown by greedy variance reduction. Split candidates are the
midpoints between consecutive distinct sorted values of each tried feature;
ties are broken toward the lowest feature index, then the lowest threshold
(candidate features are visited in ascending index order and the first
strictly-better score wins). Leaves keep the unique original training row
indices that reached them, which is what the weighted-quantile queries need.

Weighted-quantile convention (left-continuous inverse CDF): the smallest
value whose cumulative normalized weight reaches p. Levels 0 and 1 denote
the support min and max.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DataValidationError, StructuralError
from .rng import Stream, derive_seed


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 20
    min_leaf_size: int = 5
    mtry: int | None = None  # None -> ceil(d / 3)

    def resolve_mtry(self, d: int) -> int:
        m = math.ceil(d / 3) if self.mtry is None else self.mtry
        if not 1 <= m <= d:
            raise DataValidationError(f"mtry={m} outside [1, {d}]")
        return m


@dataclass
class RegressionTree:
    """Flat node arrays; feature[i] == -1 marks a leaf."""

    feature: np.ndarray  # int32
    threshold: np.ndarray  # float64
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    leaf_value: np.ndarray  # float64 (NaN on internal nodes)
    leaf_rows: list[np.ndarray]  # unique original row indices (empty on internal)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node id for every row of X (vectorized level-by-level)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        cur = np.zeros(len(X), dtype=np.int32)
        while True:
            active = self.feature[cur] >= 0
            if not active.any():
                return cur
            rows = np.nonzero(active)[0]
            nodes = cur[rows]
            go_left = X[rows, self.feature[nodes]] <= self.threshold[nodes]
            cur[rows] = np.where(go_left, self.left[nodes], self.right[nodes])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_value[self.apply(X)]

    def predict_one(self, x: np.ndarray) -> float:
        return float(self.predict(x.reshape(1, -1))[0])


def _best_split(x: np.ndarray, y: np.ndarray, min_leaf: int) -> tuple[float, float] | None:
    """(score, threshold) minimizing left+right SSE, or None if unsplittable."""
    n = len(y)
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    ks = np.arange(min_leaf, n - min_leaf + 1)  # left block sizes
    if len(ks) == 0:
        return None
    valid = xs[ks] > xs[ks - 1]
    if not valid.any():
        return None
    c1 = np.cumsum(ys)
    c2 = np.cumsum(ys * ys)
    t1, t2 = c1[-1], c2[-1]
    l1, l2 = c1[ks - 1], c2[ks - 1]
    score = (l2 - l1 * l1 / ks) + ((t2 - l2) - (t1 - l1) ** 2 / (n - ks))
    score = np.where(valid, score, np.inf)
    j = int(np.argmin(score))  # first minimum -> lowest threshold
    k = int(ks[j])
    return float(score[j]), float(0.5 * (xs[k - 1] + xs[k]))


def fit_tree(
    X: np.ndarray,
    y: np.ndarray,
    params: TreeParams,
    rng_state: int,
    row_indices: np.ndarray | None = None,
) -> RegressionTree:
    """Grow a tree on rows ``row_indices`` of (X, y) (duplicates allowed).

    Deterministic given ``rng_state``: feature subsets are drawn from one
    SplitMix64 stream in depth-first, left-child-first build order.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or len(X) != len(y):
        raise StructuralError(f"bad training shapes X{X.shape} y{y.shape}")
    if len(y) == 0:
        raise DataValidationError("cannot fit a tree on empty data")
    d = X.shape[1]
    mtry = params.resolve_mtry(d)
    stream = Stream(rng_state)
    idx0 = np.arange(len(y), dtype=np.int64) if row_indices is None else np.asarray(row_indices, np.int64)

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    leaf_value: list[float] = []
    leaf_rows: list[np.ndarray] = []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        leaf_value.append(np.nan)
        leaf_rows.append(np.empty(0, dtype=np.int64))
        return len(feature) - 1

    def make_leaf(node: int, idx: np.ndarray) -> None:
        leaf_value[node] = float(np.mean(y[idx]))
        leaf_rows[node] = np.unique(idx)

    def build(node: int, idx: np.ndarray, depth: int) -> None:
        y_node = y[idx]
        n = len(idx)
        if depth >= params.max_depth or n < 2 * params.min_leaf_size or np.ptp(y_node) == 0.0:
            make_leaf(node, idx)
            return
        candidates = np.sort(stream.choice_without_replacement(d, mtry))
        parent_sse = float(np.sum((y_node - y_node.mean()) ** 2))
        best: tuple[float, int, float] | None = None  # (score, feature, threshold)
        for f in candidates:
            found = _best_split(X[idx, f], y_node, params.min_leaf_size)
            if found is not None and (best is None or found[0] < best[0]):
                best = (found[0], int(f), found[1])
        if best is None or parent_sse - best[0] <= 1e-12 * max(1.0, parent_sse):
            make_leaf(node, idx)
            return
        _, f, thr = best
        go_left = X[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        nl = new_node()
        nr = new_node()
        left[node] = nl
        right[node] = nr
        build(nl, idx[go_left], depth + 1)
        build(nr, idx[~go_left], depth + 1)

    root = new_node()
    build(root, idx0, 0)
    return RegressionTree(
        np.array(feature, dtype=np.int32),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int32),
        np.array(right, dtype=np.int32),
        np.array(leaf_value, dtype=np.float64),
        leaf_rows,
    )


@dataclass
class ForestEnsemble:
    trees: list[RegressionTree]
    bootstrap_masks: np.ndarray  # (B, n_train) bool; True = row in that tree's sample
    rng_seed: int
    n_train: int
    n_features: int

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        """Per-tree predictions, shape (B, n_rows)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.stack([t.predict(X) for t in self.trees])


def fit_forest(
    X: np.ndarray,
    y: np.ndarray,
    n_trees: int,
    params: TreeParams,
    seed: int,
    bootstrap: bool = True,
) -> ForestEnsemble:
    """Bag ``n_trees`` trees on bootstrap resamples (with replacement).

    ``bootstrap=False`` is a test hook: every tree sees every row and the
    masks are all-true. Tree b uses the derived seed mix(seed, b) for both
    its resample and its split draws.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if n_trees < 1:
        raise DataValidationError("n_trees must be >= 1")
    if len(X) != len(y) or len(y) == 0:
        raise StructuralError(f"bad training shapes X{X.shape} y{y.shape}")
    n = len(y)
    trees = []
    masks = np.zeros((n_trees, n), dtype=bool)
    for b in range(n_trees):
        tree_seed = derive_seed(seed, b)
        if bootstrap:
            idx = Stream(derive_seed(tree_seed, 0)).integers(n, n)
            masks[b, np.unique(idx)] = True
        else:
            idx = np.arange(n, dtype=np.int64)
            masks[b, :] = True
        trees.append(fit_tree(X, y, params, derive_seed(tree_seed, 1), row_indices=idx))
    return ForestEnsemble(trees, masks, seed, n, X.shape[1])


def loo_trees(ensemble: ForestEnsemble, t: int) -> np.ndarray:
    """Indices of trees whose bootstrap sample excludes training row t."""
    return np.nonzero(~ensemble.bootstrap_masks[:, t])[0]


def loo_point_predict(ensemble: ForestEnsemble, X_train: np.ndarray, t: int) -> float:
    """Mean over trees that did not see row t; full-ensemble mean if none."""
    if not 0 <= t < ensemble.n_train:
        raise StructuralError(f"row {t} outside training range [0, {ensemble.n_train})")
    x = np.asarray(X_train, dtype=np.float64)[t].reshape(1, -1)
    keep = loo_trees(ensemble, t)
    if len(keep) == 0:
        keep = np.arange(ensemble.n_trees)
    return float(np.mean([ensemble.trees[b].predict(x)[0] for b in keep]))


def predict_test(ensemble: ForestEnsemble, x: np.ndarray) -> float:
    """Full-ensemble mean prediction for one feature vector."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if len(x) != ensemble.n_features:
        raise DataValidationError(f"input has dimension {len(x)}, forest expects {ensemble.n_features}")
    return float(np.mean(ensemble.predict_matrix(x.reshape(1, -1))[:, 0]))


# ----------------------------------------------------- quantile forest

fit_qrf = fit_forest  # same construction; leaves already retain row indices


def qrf_weights(ensemble: ForestEnsemble, z: np.ndarray) -> np.ndarray:
    """Per-training-row weights: mean over trees of 1[co-leaf] / leaf size."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    w = np.zeros(ensemble.n_train)
    for tree in ensemble.trees:
        leaf = int(tree.apply(z)[0])
        rows = tree.leaf_rows[leaf]
        w[rows] += 1.0 / len(rows)
    return w / ensemble.n_trees


def weighted_left_quantile(values: np.ndarray, weights: np.ndarray, p: float) -> float:
    return float(weighted_left_quantiles(values, weights, np.array([p]))[0])


def weighted_left_quantiles(values: np.ndarray, weights: np.ndarray, ps: np.ndarray) -> np.ndarray:
    """Smallest value with cumulative normalized weight >= p, per level.

    Zero-weight atoms are dropped (levels 0/1 hit the support min/max).
    """
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if values.shape != weights.shape:
        raise StructuralError("values and weights differ in shape")
    keep = weights > 0.0
    if not keep.any():
        raise DataValidationError("all weights are zero")
    v, w = values[keep], weights[keep]
    order = np.argsort(v, kind="stable")
    v = v[order]
    cw = np.cumsum(w[order])
    cw /= cw[-1]
    idx = np.minimum(np.searchsorted(cw, np.asarray(ps, dtype=np.float64), side="left"), len(v) - 1)
    return v[idx]


def qrf_quantile(ensemble: ForestEnsemble, z: np.ndarray, p: float, y_train: np.ndarray) -> float:
    if not 0.0 <= p <= 1.0:
        raise DataValidationError(f"quantile level {p} outside [0, 1]")
    return weighted_left_quantile(y_train, qrf_weights(ensemble, z), p)


def qrf_quantile_grid(
    ensemble: ForestEnsemble, z: np.ndarray, levels: np.ndarray, y_train: np.ndarray
) -> np.ndarray:
    """All requested levels from one weight computation."""
    return weighted_left_quantiles(y_train, qrf_weights(ensemble, z), np.asarray(levels))


# ----------------------------------------------------------- persistence

def ensemble_to_json(ensemble: ForestEnsemble, path: str | Path) -> None:
    """Dump trees + masks + seed for experiment resumption (documented in README)."""
    doc = {
        "format": "spcit-forest",
        "version": 1,
        "rng_seed": ensemble.rng_seed,
        "n_train": ensemble.n_train,
        "n_features": ensemble.n_features,
        "bootstrap_masks": ensemble.bootstrap_masks.astype(int).tolist(),
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "leaf_value": t.leaf_value.tolist(),
                "leaf_rows": [r.tolist() for r in t.leaf_rows],
            }
            for t in ensemble.trees
        ],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def ensemble_from_json(path: str | Path) -> ForestEnsemble:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "spcit-forest" or doc.get("version") != 1:
        raise DataValidationError(f"{path}: not a spcit forest dump")
    trees = [
        RegressionTree(
            np.array(t["feature"], dtype=np.int32),
            np.array(t["threshold"], dtype=np.float64),
            np.array(t["left"], dtype=np.int32),
            np.array(t["right"], dtype=np.int32),
            np.array(t["leaf_value"], dtype=np.float64),
            [np.array(r, dtype=np.int64) for r in t["leaf_rows"]],
        )
        for t in doc["trees"]
    ]
    return ForestEnsemble(
        trees,
        np.array(doc["bootstrap_masks"], dtype=bool),
        doc["rng_seed"],
        doc["n_train"],
        doc["n_features"],
    )
