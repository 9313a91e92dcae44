"""
Regression Forest
Bagged CART trees with case weights, out-of-bag prediction, impurity
importance and partial dependence
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import DimensionError, ValidationError
from .rng import RngHandle

logger = logging.getLogger(__name__)

LEAF = -1


@dataclass(frozen=True)
class ForestParams:
    """Forest hyperparameters

    mtry=None resolves to max(1, floor(p / 3)).
    """

    num_trees: int = 500
    mtry: Optional[int] = None
    min_node_size: int = 5
    bootstrap: bool = True
    max_depth: Optional[int] = None
    n_jobs: int = 1

    def resolved_mtry(self, p: int) -> int:
        mtry = self.mtry if self.mtry else max(1, p // 3)
        return int(min(max(mtry, 1), p))

    def validate(self) -> "ForestParams":
        if self.num_trees < 1:
            raise ValidationError("num_trees must be >= 1")
        if self.min_node_size < 1:
            raise ValidationError("min_node_size must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValidationError("mtry must be >= 1")
        return self


@dataclass(frozen=True)
class TreeNode:
    """View of one tree node; `feature == -1` marks a leaf"""

    feature: int
    threshold: float
    left: int
    right: int
    value: float


class Tree:
    """CART regression tree stored as parallel node arrays"""

    def __init__(self, feature, threshold, left, right, value, decrease):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)
        self.decrease = np.asarray(decrease, dtype=np.float64)

    def node(self, i: int) -> TreeNode:
        return TreeNode(
            feature=int(self.feature[i]),
            threshold=float(self.threshold[i]),
            left=int(self.left[i]),
            right=int(self.right[i]),
            value=float(self.value[i]),
        )

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row"""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] != LEAF
        while active.any():
            rows = np.flatnonzero(active)
            current = node[rows]
            go_left = X[rows, self.feature[current]] <= self.threshold[current]
            node[rows] = np.where(go_left, self.left[current], self.right[current])
            active[rows] = self.feature[node[rows]] != LEAF
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def importance(self, p: int) -> np.ndarray:
        split = self.feature != LEAF
        return np.bincount(self.feature[split], weights=self.decrease[split], minlength=p)


def _best_split(x: np.ndarray, t: np.ndarray, w: np.ndarray):
    """Best midpoint split of one feature by weighted squared error

    Returns:
        (score, threshold) where score = sum over children of (sum w t)^2 / sum w,
        or None when the feature has no admissible split
    """
    order = np.argsort(x, kind="stable")
    xs, ws, ts = x[order], w[order], t[order]
    cw = np.cumsum(ws)[:-1]
    cwt = np.cumsum(ws * ts)[:-1]
    total_w = cw[-1] + ws[-1] if cw.size else ws.sum()
    total_wt = cwt[-1] + ws[-1] * ts[-1] if cwt.size else (ws * ts).sum()
    right_w = total_w - cw
    valid = (xs[1:] > xs[:-1]) & (cw > 0) & (right_w > 0)
    if not valid.any():
        return None
    score = np.full(cw.shape, -np.inf)
    score[valid] = cwt[valid] ** 2 / cw[valid] + (total_wt - cwt[valid]) ** 2 / right_w[valid]
    # argmax returns the first maximum, i.e. the smallest threshold on ties
    k = int(np.argmax(score))
    threshold = 0.5 * (xs[k] + xs[k + 1])
    if not xs[k] <= threshold < xs[k + 1]:
        threshold = xs[k]
    return float(score[k]), float(threshold)


def grow_tree(
    X: np.ndarray,
    t: np.ndarray,
    w: np.ndarray,
    counts: np.ndarray,
    mtry: int,
    min_node_size: int,
    max_depth: Optional[int],
    gen: np.random.Generator,
) -> Tree:
    """Grow one CART tree on the rows with positive bag count

    Args:
        X: Training covariates (n x p)
        t: Targets
        w: Case weights (>= 0)
        counts: Bag multiplicity per row
        mtry: Candidate features drawn per node
        min_node_size: Nodes holding fewer units are not split
        max_depth: Optional depth limit
        gen: Random generator for feature subsampling

    Returns:
        Fitted Tree
    """
    p = X.shape[1]
    eff_w = w * counts
    feature, threshold, left, right, value, decrease = [], [], [], [], [], []

    def new_node() -> int:
        for column in (feature, left, right):
            column.append(LEAF)
        threshold.append(0.0)
        value.append(0.0)
        decrease.append(0.0)
        return len(feature) - 1

    root_rows = np.flatnonzero(counts > 0)
    stack = [(new_node(), root_rows, 0)]
    while stack:
        node_id, rows, depth = stack.pop()
        tr, wr = t[rows], eff_w[rows]
        total_w = wr.sum()
        if np.all(tr == tr[0]):
            value[node_id] = float(tr[0])
            continue
        if total_w > 0:
            value[node_id] = float(np.dot(wr, tr) / total_w)
        else:
            value[node_id] = float(np.average(tr, weights=counts[rows]))

        size = int(counts[rows].sum())
        if size < max(2, min_node_size) or total_w <= 0:
            continue
        if max_depth is not None and depth >= max_depth:
            continue

        candidates = np.sort(gen.choice(p, size=mtry, replace=False)) if mtry < p else np.arange(p)
        best = None
        for j in candidates:
            found = _best_split(X[rows, j], tr, wr)
            if found is not None and (best is None or found[0] > best[0]):
                best = (found[0], found[1], int(j))
        if best is None:
            continue

        score, cut, j = best
        parent = float(np.dot(wr, tr)) ** 2 / total_w
        goes_left = X[rows, j] <= cut
        left_id, right_id = new_node(), new_node()
        feature[node_id], threshold[node_id] = j, cut
        left[node_id], right[node_id] = left_id, right_id
        decrease[node_id] = max(score - parent, 0.0)
        stack.append((right_id, rows[~goes_left], depth + 1))
        stack.append((left_id, rows[goes_left], depth + 1))

    return Tree(feature, threshold, left, right, value, decrease)


class Forest:
    """Trained regression forest

    Keeps the training covariates and per-tree bag counts so out-of-bag
    predictions and partial dependence can be computed after fitting.
    """

    def __init__(self, trees: List[Tree], inbag: np.ndarray, X_train: np.ndarray, params: ForestParams):
        self.trees = trees
        self.inbag = inbag
        self.X_train = X_train
        self.params = params
        self._oob: Optional[np.ndarray] = None
        self.oob_fallback_rows = 0

    @property
    def num_trees(self) -> int:
        return len(self.trees)

    @property
    def p(self) -> int:
        return int(self.X_train.shape[1])

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != self.p:
            raise DimensionError(f"forest was trained on {self.p} covariates, got {X.shape[1]}")
        return X

    def tree_predictions(self, X) -> np.ndarray:
        """Per-tree predictions, shape (num_trees, rows)"""
        X = self._check(X)
        return np.vstack([tree.predict(X) for tree in self.trees])

    def predict(self, X) -> np.ndarray:
        return self.tree_predictions(X).mean(axis=0)

    def oob_predictions(self) -> np.ndarray:
        """Out-of-bag prediction for every training row

        Rows that are in the bag of every tree fall back to the in-bag
        forest prediction.
        """
        if self._oob is None:
            per_tree = self.tree_predictions(self.X_train)
            out = self.inbag == 0
            n_out = out.sum(axis=0)
            sums = np.where(out, per_tree, 0.0).sum(axis=0)
            oob = np.where(n_out > 0, sums / np.maximum(n_out, 1), per_tree.mean(axis=0))
            self.oob_fallback_rows = int(np.sum(n_out == 0))
            if self.oob_fallback_rows:
                logger.warning(
                    "rows without out-of-bag trees use in-bag predictions",
                    extra={"event": "oob_fallback", "rows": self.oob_fallback_rows},
                )
            self._oob = oob
        return self._oob

    def predict_oob(self, row: int) -> float:
        return float(self.oob_predictions()[row])

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_oob"] = None
        return state


def fit_forest(
    X,
    t,
    w=None,
    params: ForestParams = ForestParams(),
    rng: RngHandle = RngHandle(0),
) -> Forest:
    """Fit a regression forest

    Args:
        X: Covariates (n x p)
        t: Targets (n)
        w: Nonnegative case weights, not all zero (defaults to ones)
        params: Hyperparameters
        rng: Stream; tree k uses the child stream (k,)

    Returns:
        Forest
    """
    params.validate()
    X = np.asarray(X, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError("cannot fit a forest on zero rows")
    n, p = X.shape
    if t.shape != (n,):
        raise DimensionError(f"target has shape {t.shape}, expected ({n},)")
    w = np.ones(n) if w is None else np.asarray(w, dtype=np.float64)
    if w.shape != (n,):
        raise DimensionError(f"weights have shape {w.shape}, expected ({n},)")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValidationError("case weights must be nonnegative and not all zero")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(t)) and np.all(np.isfinite(w))):
        raise ValidationError("forest inputs must be finite")

    mtry = params.resolved_mtry(p)

    def grow(k: int):
        gen = rng.child(k).generator
        if params.bootstrap:
            counts = np.bincount(gen.integers(0, n, size=n), minlength=n)
        else:
            counts = np.ones(n, dtype=np.int64)
        tree = grow_tree(X, t, w, counts, mtry, params.min_node_size, params.max_depth, gen)
        return tree, counts

    if params.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=params.n_jobs) as executor:
            grown = list(executor.map(grow, range(params.num_trees)))
    else:
        grown = [grow(k) for k in range(params.num_trees)]

    trees = [tree for tree, _ in grown]
    inbag = np.vstack([counts for _, counts in grown]).astype(np.int32)
    return Forest(trees, inbag, X.copy(), params)


def predict(forest: Forest, X_new) -> np.ndarray:
    return forest.predict(X_new)


def predict_oob(forest: Forest, row: int) -> float:
    return forest.predict_oob(row)


def variable_importance(forest: Forest) -> np.ndarray:
    """Impurity-decrease importance per feature, averaged over trees"""
    total = np.zeros(forest.p)
    for tree in forest.trees:
        total += tree.importance(forest.p)
    return total / forest.num_trees


def partial_dependence(forest: Forest, feature: int, grid: Sequence[float]) -> np.ndarray:
    """Mean prediction with one feature overwritten by each grid value"""
    if not 0 <= feature < forest.p:
        raise ValidationError(f"feature index {feature} out of range for {forest.p} covariates")
    grid = np.asarray(grid, dtype=np.float64)
    if not np.all(np.isfinite(grid)):
        raise ValidationError("grid values must be finite")
    out = np.empty(grid.shape[0])
    X = forest.X_train.copy()
    for k, g in enumerate(grid):
        X[:, feature] = g
        out[k] = forest.predict(X).mean()
    return out


def importance_table(forest: Forest, names: Sequence[str]) -> pd.DataFrame:
    frame = pd.DataFrame({"covariate": list(names), "importance": variable_importance(forest)})
    return frame.sort_values("importance", ascending=False, kind="stable").reset_index(drop=True)


def partial_dependence_table(forest: Forest, names: Sequence[str], grid_size: int = 20) -> pd.DataFrame:
    """Partial dependence over an evenly spaced grid spanning each covariate's range"""
    frames = []
    for j, name in enumerate(names):
        column = forest.X_train[:, j]
        grid = np.linspace(column.min(), column.max(), grid_size)
        frames.append(
            pd.DataFrame({"covariate": name, "value": grid, "partial_dependence": partial_dependence(forest, j, grid)})
        )
    return pd.concat(frames, ignore_index=True)
