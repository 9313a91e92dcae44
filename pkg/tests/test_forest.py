import pickle

import numpy as np
import pytest

from saecount.errors import DimensionError, ValidationError
from saecount.forest import (
    Forest,
    ForestParams,
    _best_split,
    fit_forest,
    importance_table,
    partial_dependence,
    partial_dependence_table,
    predict_oob,
    variable_importance,
)
from saecount.rng import make_rng


def _linear(n, seed, noise=0.5):
    gen = np.random.default_rng(seed)
    X = gen.uniform(-1, 1, size=(n, 2))
    t = 2.0 * X[:, 0] + noise * gen.normal(size=n)
    return X, t


def test_constant_target():
    X = np.random.default_rng(0).normal(size=(30, 3))
    forest = fit_forest(X, np.full(30, 4.2), params=ForestParams(num_trees=10), rng=make_rng(1))
    np.testing.assert_allclose(forest.predict(X), 4.2)
    assert np.all(variable_importance(forest) == 0)


def test_single_tree_memorizes():
    X, t = _linear(40, 1)
    forest = fit_forest(X, t, params=ForestParams(num_trees=1, mtry=2, min_node_size=1, bootstrap=False))
    np.testing.assert_allclose(forest.predict(X), t)


def test_has_skill_on_linear_signal():
    X, t = _linear(200, 2)
    X_test, t_test = _linear(200, 3)
    forest = fit_forest(X, t, params=ForestParams(num_trees=50), rng=make_rng(2))
    assert np.mean((forest.predict(X_test) - t_test) ** 2) < np.var(t_test)


def test_deterministic():
    X, t = _linear(60, 4)
    a = fit_forest(X, t, params=ForestParams(num_trees=20), rng=make_rng(7)).predict(X)
    b = fit_forest(X, t, params=ForestParams(num_trees=20), rng=make_rng(7)).predict(X)
    np.testing.assert_array_equal(a, b)


def test_thread_count_does_not_change_forest():
    X, t = _linear(60, 4)
    serial = fit_forest(X, t, params=ForestParams(num_trees=20, n_jobs=1), rng=make_rng(7))
    threaded = fit_forest(X, t, params=ForestParams(num_trees=20, n_jobs=4), rng=make_rng(7))
    np.testing.assert_array_equal(serial.predict(X), threaded.predict(X))
    np.testing.assert_array_equal(serial.inbag, threaded.inbag)


def test_bags_have_n_draws():
    X, t = _linear(50, 5)
    forest = fit_forest(X, t, params=ForestParams(num_trees=10), rng=make_rng(3))
    assert np.all(forest.inbag.sum(axis=1) == 50)


def test_tree_order_invariance():
    X, t = _linear(60, 6)
    forest = fit_forest(X, t, params=ForestParams(num_trees=15), rng=make_rng(3))
    reversed_forest = Forest(forest.trees[::-1], forest.inbag[::-1], forest.X_train, forest.params)
    np.testing.assert_allclose(forest.predict(X), reversed_forest.predict(X))


def test_row_permutation_permutes_predictions():
    X, t = _linear(60, 6)
    forest = fit_forest(X, t, params=ForestParams(num_trees=15), rng=make_rng(3))
    order = np.random.default_rng(0).permutation(60)
    np.testing.assert_array_equal(forest.predict(X[order]), forest.predict(X)[order])


def test_weight_scaling_invariance():
    X, t = _linear(60, 8)
    w = np.random.default_rng(1).uniform(0.5, 2.0, size=60)
    params = ForestParams(num_trees=10)
    a = fit_forest(X, t, w, params, make_rng(5))
    b = fit_forest(X, t, 3.0 * w, params, make_rng(5))
    np.testing.assert_allclose(a.predict(X), b.predict(X), rtol=1e-12, atol=1e-12)
    for ta, tb in zip(a.trees, b.trees):
        np.testing.assert_array_equal(ta.feature, tb.feature)
        np.testing.assert_array_equal(ta.threshold, tb.threshold)


def test_leaf_values_are_weighted_means():
    X, t = _linear(50, 9)
    w = np.random.default_rng(2).uniform(0.5, 2.0, size=50)
    forest = fit_forest(X, t, w, ForestParams(num_trees=1, min_node_size=10, bootstrap=False), make_rng(1))
    tree = forest.trees[0]
    leaves = tree.apply(X)
    for leaf in np.unique(leaves):
        rows = leaves == leaf
        assert tree.value[leaf] == pytest.approx(np.average(t[rows], weights=w[rows]))


def _brute_force_split(X, t):
    best = None
    for j in range(X.shape[1]):
        values = np.unique(X[:, j])
        for lo, hi in zip(values[:-1], values[1:]):
            cut = 0.5 * (lo + hi)
            left = X[:, j] <= cut
            sse = ((t[left] - t[left].mean()) ** 2).sum() + ((t[~left] - t[~left].mean()) ** 2).sum()
            if best is None or sse < best[0] - 1e-12:
                best = (sse, j, cut)
    return best


@pytest.mark.parametrize("seed", range(5))
def test_root_split_matches_brute_force(seed):
    gen = np.random.default_rng(seed)
    X = gen.normal(size=(12, 2))
    t = gen.normal(size=12)
    forest = fit_forest(X, t, params=ForestParams(num_trees=1, mtry=2, min_node_size=1, bootstrap=False))
    _, j, cut = _brute_force_split(X, t)
    root = forest.trees[0].node(0)
    assert root.feature == j
    assert root.threshold == pytest.approx(cut)


def test_best_split_prefers_smallest_threshold_on_ties():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    t = np.array([0.0, 1.0, 1.0, 0.0])
    score, cut = _best_split(x, t, np.ones(4))
    assert cut == 1.5


def test_best_split_none_for_constant_feature():
    assert _best_split(np.ones(5), np.arange(5.0), np.ones(5)) is None


def test_oob_fallback_single_tree():
    X, t = _linear(30, 10)
    forest = fit_forest(X, t, params=ForestParams(num_trees=1, bootstrap=False))
    np.testing.assert_allclose(forest.oob_predictions(), forest.predict(X))
    assert forest.oob_fallback_rows == 30


def test_oob_excluded_row_averages_all_trees():
    X, t = _linear(30, 11)
    forest = fit_forest(X, t, params=ForestParams(num_trees=5), rng=make_rng(1))
    forest.inbag[:, 0] = 0
    forest._oob = None
    assert predict_oob(forest, 0) == pytest.approx(forest.predict(X[:1])[0])


@pytest.mark.slow
def test_oob_is_pessimistic():
    gaps = []
    for seed in range(20):
        X, t = _linear(500, 100 + seed)
        forest = fit_forest(X, t, params=ForestParams(num_trees=50), rng=make_rng(seed))
        gaps.append(np.mean((forest.oob_predictions() - t) ** 2) - np.mean((forest.predict(X) - t) ** 2))
    assert np.mean(gaps) > 0


@pytest.mark.slow
def test_importance_strong_beats_noise():
    wins = 0
    for seed in range(20):
        X, t = _linear(200, 200 + seed)
        forest = fit_forest(X, t, params=ForestParams(num_trees=30, mtry=2), rng=make_rng(seed))
        importance = variable_importance(forest)
        wins += importance[0] > importance[1]
    assert wins >= 19


def test_unused_feature_has_zero_importance():
    X, t = _linear(100, 12)
    X = np.column_stack([X[:, 0], np.zeros(100)])
    forest = fit_forest(X, t, params=ForestParams(num_trees=10, mtry=2), rng=make_rng(1))
    assert variable_importance(forest)[1] == 0


def test_partial_dependence_flat_for_constant_forest():
    X = np.random.default_rng(0).normal(size=(30, 2))
    forest = fit_forest(X, np.full(30, 1.0), params=ForestParams(num_trees=5))
    np.testing.assert_allclose(partial_dependence(forest, 0, np.linspace(-2, 2, 7)), 1.0)


def test_partial_dependence_monotone_on_signal():
    gen = np.random.default_rng(13)
    X = gen.uniform(-1, 1, size=(300, 2))
    forest = fit_forest(X, X[:, 0], params=ForestParams(num_trees=50, mtry=2), rng=make_rng(2))
    pd_values = partial_dependence(forest, 0, np.linspace(-0.9, 0.9, 10))
    assert np.all(np.diff(pd_values) > 0)


def test_partial_dependence_brute_force():
    X, t = _linear(40, 14)
    forest = fit_forest(X, t, params=ForestParams(num_trees=5), rng=make_rng(1))
    X_over = X.copy()
    X_over[:, 1] = 0.25
    assert partial_dependence(forest, 1, [0.25])[0] == pytest.approx(forest.predict(X_over).mean())
    with pytest.raises(ValidationError):
        partial_dependence(forest, 2, [0.0])


def test_tables():
    X, t = _linear(60, 15)
    forest = fit_forest(X, t, params=ForestParams(num_trees=10, mtry=2), rng=make_rng(1))
    table = importance_table(forest, ["x1", "x2"])
    assert table["covariate"].iloc[0] == "x1"
    assert table["importance"].is_monotonic_decreasing
    pdp = partial_dependence_table(forest, ["x1", "x2"], grid_size=5)
    assert pdp.shape == (10, 3)
    assert list(pdp.columns) == ["covariate", "value", "partial_dependence"]


def test_input_validation():
    X, t = _linear(10, 16)
    with pytest.raises(ValidationError):
        fit_forest(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(DimensionError):
        fit_forest(X, t[:5])
    with pytest.raises(ValidationError):
        fit_forest(X, t, np.zeros(10))
    with pytest.raises(ValidationError):
        fit_forest(X, t, -np.ones(10))
    forest = fit_forest(X, t, params=ForestParams(num_trees=2))
    with pytest.raises(DimensionError):
        forest.predict(np.zeros((3, 3)))


def test_pickle_round_trip():
    X, t = _linear(40, 17)
    forest = fit_forest(X, t, params=ForestParams(num_trees=5), rng=make_rng(1))
    forest.oob_predictions()
    again = pickle.loads(pickle.dumps(forest))
    np.testing.assert_array_equal(again.predict(X), forest.predict(X))
    np.testing.assert_array_equal(again.oob_predictions(), forest.oob_predictions())
