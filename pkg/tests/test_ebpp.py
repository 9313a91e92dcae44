import math

import numpy as np
import pytest

from saecount.ebpp import (
    GlmmFit,
    ebpp_domain_mean,
    ebpp_domain_means,
    fit_poisson_glmm_pql,
    glm_coefficients,
    stepwise_aic,
)
from saecount.errors import DimensionError, RankDeficiencyError, ValidationError
from saecount.lmm import RandomEffects, VarianceComponents
from saecount.rng import make_rng, stratified_srswor

from helpers import make_population, make_sample


def plug_in(log_mu, nu=None, sigma2_nu=0.0):
    return GlmmFit(
        beta=np.array([log_mu, 0.0]),
        vc=VarianceComponents(sigma2_nu, 1.0),
        re=RandomEffects(nu or {}),
        converged=True,
        names=("(intercept)", "x"),
    )


def test_small_domain_example():
    fit = plug_in(math.log(7.0))
    population = make_population([1, 1], y=np.array([3, 9]))
    sample = make_sample([1], [3])
    assert ebpp_domain_means(fit, sample, population)[1] == pytest.approx(5.0)


def test_fully_sampled_domain_is_sample_mean(poisson_population):
    plan = {d: 80 for d in poisson_population.domain_ids}
    plan[1] = 10
    sample = stratified_srswor(make_rng(3), poisson_population, plan)
    fit = fit_poisson_glmm_pql(sample)
    means = ebpp_domain_means(fit, sample, poisson_population)
    truth = poisson_population.domain_means()
    for d in poisson_population.domain_ids[1:]:
        assert means[d] == pytest.approx(truth[d], rel=1e-12)


def test_out_of_sample_domain_uses_fixed_part(poisson_population, poisson_sample):
    keep = poisson_sample.domains != 1
    sample = make_sample(
        poisson_sample.domains[keep], poisson_sample.y[keep], poisson_sample.X[keep], poisson_sample.covariates
    )
    fit = fit_poisson_glmm_pql(sample)
    assert fit.re.get(1) == 0.0
    means = ebpp_domain_means(fit, sample, poisson_population)
    rows = poisson_population.domains == 1
    expected = np.mean(np.exp(fit.linear_predictor(poisson_population.X[rows])))
    assert means[1] == pytest.approx(expected, rel=1e-10)


def test_unknown_domain_rejected(poisson_population, poisson_sample):
    fit = fit_poisson_glmm_pql(poisson_sample)
    with pytest.raises(ValidationError):
        ebpp_domain_mean(fit, poisson_sample, poisson_population, 999)
    d = poisson_population.domain_ids[0]
    assert ebpp_domain_mean(fit, poisson_sample, poisson_population, d) == pytest.approx(
        ebpp_domain_means(fit, poisson_sample, poisson_population)[d]
    )


def test_pql_converges_and_recovers_fixed_part(poisson_sample):
    fit = fit_poisson_glmm_pql(poisson_sample)
    assert fit.converged
    assert fit.names == ("(intercept)", "x1", "x2")
    assert fit.covariates == ("x1", "x2")
    np.testing.assert_allclose(fit.beta[1:], [1.0, 1.0], atol=0.2)
    table = fit.coefficient_table()
    assert list(table["term"]) == ["(intercept)", "x1", "x2"]


def test_no_random_effect_matches_glm():
    gen = np.random.default_rng(5)
    domains = np.repeat(np.arange(1, 31), 20)
    X = gen.uniform(-1, 1, size=(600, 2))
    y = np.round(50 * np.exp(0.3 * X[:, 0] - 0.2 * X[:, 1])).astype(int)
    sample = make_sample(domains, y, X, ("a", "b"))
    fit = fit_poisson_glmm_pql(sample, tol=1e-10)
    if fit.vc.sigma2_nu == 0:
        np.testing.assert_allclose(fit.beta, glm_coefficients(sample), atol=1e-3)
    else:
        assert fit.vc.sigma2_nu < 1e-3
        np.testing.assert_allclose(fit.beta, glm_coefficients(sample), atol=1e-2)


def test_rank_deficient_design_rejected():
    gen = np.random.default_rng(6)
    x = gen.normal(size=40)
    sample = make_sample(np.repeat([1, 2], 20), gen.poisson(2.0, size=40), np.column_stack([x, -x]), ("x", "minus_x"))
    with pytest.raises(RankDeficiencyError) as info:
        fit_poisson_glmm_pql(sample)
    assert info.value.columns == ["minus_x"]


def test_empty_sample_rejected():
    sample = make_sample(np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros((0, 1)))
    with pytest.raises(ValidationError):
        fit_poisson_glmm_pql(sample)


def test_max_iter_flags_non_convergence(poisson_sample):
    fit = fit_poisson_glmm_pql(poisson_sample, tol=1e-300, max_iter=3)
    assert not fit.converged
    assert fit.iterations == 3


def test_stepwise_aic_on_sample(poisson_sample):
    selected = stepwise_aic(poisson_sample)
    assert selected and set(selected) <= {"x1", "x2"}
    assert stepwise_aic(poisson_sample, max_terms=1) == selected[:1]


def test_domain_mean_lies_within_observed_and_predicted_counts(poisson_population, poisson_sample):
    fit = fit_poisson_glmm_pql(poisson_sample)
    means = ebpp_domain_means(fit, poisson_sample, poisson_population)
    mu = np.exp(fit.linear_predictor(poisson_population.X, poisson_population.domains))
    sampled_rows = np.zeros(poisson_population.N, dtype=bool)
    sampled_rows[poisson_sample.population_index] = True
    for d in poisson_population.domain_ids:
        observed = poisson_sample.y[poisson_sample.domains == d]
        predicted = mu[(poisson_population.domains == d) & ~sampled_rows]
        values = np.concatenate([observed, predicted])
        assert values.min() - 1e-9 <= means[d] <= values.max() + 1e-9


def test_pql_restarted_at_its_solution_stays_there(poisson_sample):
    fit = fit_poisson_glmm_pql(poisson_sample, tol=1e-8, max_iter=500)
    assert fit.converged
    again = fit_poisson_glmm_pql(poisson_sample, tol=1e-8, max_iter=500, init=fit)
    assert again.converged
    assert again.iterations <= 3
    np.testing.assert_allclose(again.beta, fit.beta, rtol=0, atol=1e-6)
    assert again.vc.sigma2_nu == pytest.approx(fit.vc.sigma2_nu, abs=1e-6)
    d = poisson_sample.domain_ids[0]
    assert again.re.get(d) == pytest.approx(fit.re.get(d), abs=1e-6)


def test_warm_start_must_match_the_sample_terms(poisson_sample):
    fit = fit_poisson_glmm_pql(poisson_sample)
    narrow = make_sample(poisson_sample.domains, poisson_sample.y, poisson_sample.X[:, :1], ("x1",))
    with pytest.raises(DimensionError):
        fit_poisson_glmm_pql(narrow, init=fit)
