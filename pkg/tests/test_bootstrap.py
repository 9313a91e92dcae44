import logging

import numpy as np
import pytest

from saecount import bootstrap
from saecount.bootstrap import (
    SCHEMES,
    MseReport,
    center_scale_residuals,
    decompose_residuals,
    match_nearest,
    report_table,
    run_scheme,
)
from saecount.errors import BootstrapError, ConfigError, ConvergenceError, ValidationError
from saecount.fitting import FitSettings, fit_model
from saecount.forest import ForestParams
from saecount.gmerf import GmerfFit
from saecount.lmm import RandomEffects, VarianceComponents
from saecount.rng import make_rng

from helpers import constant_forest, make_population

QUICK = FitSettings(params=ForestParams(num_trees=10), max_iter=10, max_macro=6, max_micro=10)


@pytest.fixture
def fits(poisson_sample):
    return {
        "gmerf": fit_model("gmerf", poisson_sample, QUICK, make_rng(1)),
        "merf": fit_model("merf", poisson_sample, QUICK, make_rng(1)),
    }


def test_center_scale_hits_target_variance():
    z = np.random.default_rng(0).gamma(2.0, size=500)
    out = center_scale_residuals(z, 0.37)
    assert abs(out.mean()) < 1e-12
    assert abs(np.mean(out**2) - 0.37) < 1e-12


def test_center_scale_degenerate_inputs():
    np.testing.assert_array_equal(center_scale_residuals(np.full(4, 2.0), 1.0), np.zeros(4))
    np.testing.assert_array_equal(center_scale_residuals([1.0, 3.0], 0.0), [0.0, 0.0])
    with pytest.raises(ValidationError):
        center_scale_residuals([], 1.0)
    with pytest.raises(ValidationError):
        center_scale_residuals([1.0, 2.0], -1.0)


def test_decompose_residuals():
    z = np.array([1.0, 3.0, 10.0, 14.0, 12.0])
    parts = decompose_residuals(z, [1, 1, 2, 2, 2], sigma2_nu=4.0)
    np.testing.assert_allclose(parts.zbar, [2.0, 12.0])
    assert parts.domain_ids == (1, 2)
    assert parts.level1_target == pytest.approx((1 + 1 + 4 + 4 + 0) / 3)
    assert np.mean(parts.z1_centered_scaled**2) == pytest.approx(parts.level1_target)
    assert np.mean(parts.z2_centered_scaled**2) == pytest.approx(4.0)


@pytest.mark.parametrize(
    "target,expected",
    [(2.0, 0), (3.0, 1), (4.0, 1), (10.0, 3), (-5.0, 0)],
)
def test_match_nearest_sorted(target, expected):
    assert match_nearest([target], [1.0, 3.0, 3.0, 5.0])[0] == expected


def test_match_nearest_ties_take_lowest_index():
    np.testing.assert_array_equal(match_nearest([1.0, 2.0, 4.0], [5.0, 1.0, 3.0, 1.0]), [1, 1, 0])
    with pytest.raises(ValidationError):
        match_nearest([1.0], [])


@pytest.mark.parametrize("scheme", ["nonparametric", "merf-npc"])
def test_matched_outcomes_come_from_the_sample(scheme, fits, poisson_sample, poisson_population):
    fit = fits[SCHEMES[scheme]]
    context = bootstrap._base_context(
        scheme, fit, poisson_population, poisson_sample.domain_sizes(), make_rng(3), QUICK
    )
    context.z1 = np.linspace(-1, 1, 50)
    context.z2 = np.linspace(-0.3, 0.3, 10)
    context.sample_y = poisson_sample.y.copy()
    context.predictors = fit.forest.predict(poisson_sample.X)
    y_b = bootstrap._bootstrap_outcome(context, np.random.default_rng(0))
    assert y_b.shape == (poisson_population.N,)
    assert set(np.unique(y_b)) <= set(np.unique(poisson_sample.y))


def test_scheme_must_match_fit(fits, poisson_sample, poisson_population):
    with pytest.raises(ConfigError):
        run_scheme("parametric", fits["merf"], poisson_sample, poisson_population, 1, make_rng(1))
    with pytest.raises(ConfigError):
        run_scheme("merf-npc", fits["gmerf"], poisson_sample, poisson_population, 1, make_rng(1))
    with pytest.raises(ConfigError):
        run_scheme("wild", fits["gmerf"], poisson_sample, poisson_population, 1, make_rng(1))


def test_requires_positive_B(fits, poisson_sample, poisson_population):
    with pytest.raises(ValidationError):
        run_scheme("parametric", fits["gmerf"], poisson_sample, poisson_population, 0, make_rng(1), QUICK)


@pytest.mark.parametrize("scheme", sorted(SCHEMES))
def test_single_replicate(scheme, fits, poisson_sample, poisson_population):
    report = run_scheme(scheme, fits[SCHEMES[scheme]], poisson_sample, poisson_population, 1, make_rng(2), QUICK)
    assert report.scheme == scheme
    assert report.domain_ids == tuple(poisson_population.domain_ids)
    assert report.B == 1 and report.failures == 0
    assert np.all(np.isfinite(report.mse)) and np.all(report.mse >= 0)
    np.testing.assert_allclose(report.rmse, np.sqrt(report.mse))


def test_replicates_are_reproducible(fits, poisson_sample, poisson_population):
    a = run_scheme("parametric", fits["gmerf"], poisson_sample, poisson_population, 2, make_rng(4), QUICK)
    b = run_scheme("parametric", fits["gmerf"], poisson_sample, poisson_population, 2, make_rng(4), QUICK)
    np.testing.assert_array_equal(a.squared_errors, b.squared_errors)


@pytest.mark.slow
def test_thread_count_does_not_change_results(fits, poisson_sample, poisson_population):
    serial = run_scheme("merf-npc", fits["merf"], poisson_sample, poisson_population, 4, make_rng(5), QUICK, 1)
    pooled = run_scheme("merf-npc", fits["merf"], poisson_sample, poisson_population, 4, make_rng(5), QUICK, 2)
    np.testing.assert_array_equal(serial.mse, pooled.mse)


def test_too_many_failures(fits, poisson_sample, poisson_population, monkeypatch):
    def broken(*args, **kwargs):
        raise ConvergenceError("no")

    monkeypatch.setattr(bootstrap, "fit_model", broken)
    with pytest.raises(BootstrapError) as info:
        run_scheme("parametric", fits["gmerf"], poisson_sample, poisson_population, 3, make_rng(1), QUICK)
    assert info.value.failures == 3 and info.value.attempted == 3
    assert info.value.exit_code == 3


def test_report_table_and_cv(tmp_path):
    report = MseReport("parametric", (1, 2), np.array([4.0, 1.0]), np.array([2.0, 0.0]), B=10)
    np.testing.assert_allclose(report.cv[:1], [1.0])
    assert np.isnan(report.cv[1])
    table = report_table([report, report])
    assert len(table) == 4
    lines = report.write_csv(tmp_path / "mse.csv", header="B=10").read_text().splitlines()
    assert lines[0] == "# B=10"
    assert lines[1] == "domain_id,scheme,mse,rmse,cv,B,failures"


def test_small_worked_examples():
    assert match_nearest([4.9], [2.0, 5.0, 9.0])[0] == 1
    assert match_nearest([3.2], [1.0, 3.0, 6.0])[0] == 1
    np.testing.assert_allclose(center_scale_residuals([1.0, -1.0], 4.0), [2.0, -2.0])


def test_single_replicate_mse_is_its_squared_error(fits, poisson_sample, poisson_population):
    report = run_scheme("parametric", fits["gmerf"], poisson_sample, poisson_population, 1, make_rng(7), QUICK)
    np.testing.assert_array_equal(report.mse, report.squared_errors[0])


def test_report_records_halved_refit_settings(fits, poisson_sample, poisson_population, caplog, monkeypatch):
    monkeypatch.setattr(logging.getLogger("saecount"), "propagate", True)
    caplog.set_level(logging.INFO, logger="saecount")
    report = run_scheme("merf-npc", fits["merf"], poisson_sample, poisson_population, 1, make_rng(3), QUICK)
    assert report.refit_settings == QUICK.halved()
    assert report.refit_settings.max_iter == 5 and report.refit_settings.params.num_trees == 10
    events = [r for r in caplog.records if getattr(r, "event", None) == "refit_caps_halved"]
    assert len(events) == 1 and events[0].max_iter == 5


def test_refits_fall_back_to_the_forest_parameters(fits, poisson_sample, poisson_population):
    report = run_scheme("merf-npc", fits["merf"], poisson_sample, poisson_population, 1, make_rng(3))
    assert report.refit_settings.params == fits["merf"].forest.params


def fixed_gmerf(sigma2_nu, level=5.0):
    """GMERF with a constant log(level) forest and no fitted effects"""
    return GmerfFit(
        forest=constant_forest(np.log(level)),
        vc=VarianceComponents(sigma2_nu, 1.0),
        re=RandomEffects(),
        macro_trace=[0.0],
        micro_traces=[[0.0]],
        converged=True,
        micro_converged=[True],
        covariates=("x1", "x2"),
    )


def test_parametric_populations_average_their_drawn_effects():
    D, N_i = 5, 10_000
    gen = np.random.default_rng(8)
    population = make_population(np.repeat(np.arange(1, D + 1), N_i), gen.normal(size=(D * N_i, 2)))
    context = bootstrap._base_context(
        "parametric", fixed_gmerf(0.09), population, {d: 5 for d in range(1, D + 1)}, make_rng(1), QUICK
    )
    y_b = bootstrap._bootstrap_outcome(context, np.random.default_rng(3))
    nu = np.random.default_rng(3).normal(0.0, 0.3, size=D)
    means = y_b.reshape(D, N_i).mean(axis=1)
    np.testing.assert_allclose(means, 5.0 * np.exp(nu), rtol=0.02)


@pytest.mark.slow
def test_parametric_scheme_without_effects_measures_estimator_noise(poisson_population):
    fit = fixed_gmerf(0.0)
    plan = {d: 20 for d in poisson_population.domain_ids}
    report = bootstrap.parametric_bootstrap_gmerf(fit, poisson_population, plan, 20, make_rng(6), QUICK)
    assert report.failures == 0
    assert np.all(report.mse > 0)
    # iid Pois(5) units: a mean over 20 of 80 units has variance 5 (1/20 - 1/80)
    assert np.median(report.mse) < 1.0
    np.testing.assert_allclose(report.estimate, 5.0)
