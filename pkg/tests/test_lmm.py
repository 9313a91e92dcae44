import math

import numpy as np
import pytest
from scipy import stats

from saecount.errors import ValidationError
from saecount.lmm import (
    RandomEffects,
    VarianceComponents,
    blup_predict,
    fit_intercept_lmm,
    marginal_loglik,
    relative_change,
)


def _dense_loglik(vc, r, w, domains):
    same = (domains[:, None] == domains[None, :]).astype(float)
    cov = vc.sigma2_nu * same + np.diag(vc.sigma2_eps / w)
    return stats.multivariate_normal(mean=np.zeros(r.size), cov=cov).logpdf(r)


@pytest.mark.parametrize("seed", range(6))
def test_woodbury_matches_dense(seed):
    gen = np.random.default_rng(seed)
    sizes = gen.integers(1, 5, size=gen.integers(1, 4))
    domains = np.repeat(np.arange(len(sizes)), sizes)
    n = domains.size
    r = gen.normal(size=n)
    w = gen.uniform(0.3, 3.0, size=n)
    vc = VarianceComponents(float(gen.uniform(0.05, 2.0)), float(gen.uniform(0.1, 2.0)))
    value = marginal_loglik(vc, r, np.zeros(n), w, domains)
    assert abs(value - _dense_loglik(vc, r, w, domains)) < 1e-10


def test_two_by_two_toy():
    domains = np.array([1, 1, 2, 2])
    r = np.array([0.3, -0.1, 1.2, 0.4])
    w = np.ones(4)
    vc = VarianceComponents(0.5, 1.5)
    assert abs(marginal_loglik(vc, r, np.zeros(4), w, domains) - _dense_loglik(vc, r, w, domains)) < 1e-10


def test_no_random_effect_is_independent_gaussians():
    gen = np.random.default_rng(1)
    r, w = gen.normal(size=8), gen.uniform(0.5, 2.0, size=8)
    domains = np.repeat([1, 2], 4)
    value = marginal_loglik(VarianceComponents(0.0, 0.7), r, np.zeros(8), w, domains)
    expected = stats.norm.logpdf(r, scale=np.sqrt(0.7 / w)).sum()
    assert value == pytest.approx(expected, abs=1e-10)


def test_doubling_eps_changes_loglik_analytically():
    gen = np.random.default_rng(2)
    r = gen.normal(size=10)
    domains = np.arange(10)
    w = np.ones(10)
    base = marginal_loglik(VarianceComponents(0.0, 1.0), r, np.zeros(10), w, domains)
    doubled = marginal_loglik(VarianceComponents(0.0, 2.0), r, np.zeros(10), w, domains)
    expected = -0.5 * 10 * math.log(2.0) + 0.25 * float(np.sum(r**2))
    assert doubled - base == pytest.approx(expected, abs=1e-10)


def test_singular_covariance_rejected():
    with pytest.raises(ValidationError):
        marginal_loglik(VarianceComponents(0.1, 0.0), np.ones(3), np.zeros(3), np.ones(3), np.array([1, 1, 2]))


def test_zero_residuals():
    target = np.array([1.0, 2.0, 3.0])
    fit = fit_intercept_lmm(target, target, np.ones(3), np.array([1, 1, 2]))
    assert fit.vc.sigma2_nu == 0.0 and fit.vc.sigma2_eps == 0.0
    assert all(v == 0.0 for v in fit.re.nu.values())


def test_single_domain_closed_form_blup():
    gen = np.random.default_rng(3)
    r = 0.8 + gen.normal(size=15)
    vc, re, _ = fit_intercept_lmm(r, np.zeros(15), np.ones(15), np.ones(15, dtype=int))
    if vc.sigma2_nu > 0:
        shrinkage = vc.sigma2_nu / (vc.sigma2_nu + vc.sigma2_eps / 15)
        assert re.get(1) == pytest.approx(shrinkage * r.mean())
    else:
        assert re.get(1) == 0.0


def test_blup_shrinks_weighted_means():
    gen = np.random.default_rng(4)
    domains = np.repeat(np.arange(8), 6)
    nu = gen.normal(0, 0.5, size=8)
    r = nu[domains] + gen.normal(size=domains.size)
    w = gen.uniform(0.5, 2.0, size=domains.size)
    fit = fit_intercept_lmm(r, np.zeros_like(r), w, domains)
    for d in range(8):
        rows = domains == d
        assert abs(fit.re.get(d)) <= abs(np.average(r[rows], weights=w[rows])) + 1e-12


def test_loglik_not_below_init():
    gen = np.random.default_rng(5)
    domains = np.repeat(np.arange(10), 5)
    r = gen.normal(0, 0.4, size=10)[domains] + gen.normal(size=50)
    fit = fit_intercept_lmm(r, np.zeros(50), np.ones(50), domains, init=VarianceComponents(3.0, 0.2))
    assert fit.loglik >= fit.loglik_init
    assert fit.loglik == pytest.approx(marginal_loglik(fit.vc, r, np.zeros(50), np.ones(50), domains))


def test_boundary_estimate_is_exact_zero():
    domains = np.repeat(np.arange(5), 4)
    # identical domain means: no between-domain variance
    r = np.tile([1.0, -1.0, 0.5, -0.5], 5)
    fit = fit_intercept_lmm(r, np.zeros(20), np.ones(20), domains)
    assert fit.vc.sigma2_nu == 0.0
    assert blup_predict(fit.vc, fit.re, 2) == 0.0


@pytest.mark.slow
def test_recovers_random_intercept_variance():
    hits = 0
    for seed in range(100):
        gen = np.random.default_rng(seed)
        domains = np.repeat(np.arange(50), 18)
        r = gen.normal(0, 0.3, size=50)[domains] + gen.normal(size=domains.size)
        vc, _, _ = fit_intercept_lmm(r, np.zeros_like(r), np.ones_like(r), domains)
        hits += 0.045 <= vc.sigma2_nu <= 0.135
    assert hits >= 90


def test_blup_predict_unseen_domain():
    vc = VarianceComponents(0.2, 1.0)
    re = RandomEffects({1: 0.4})
    assert blup_predict(vc, re, 1) == 0.4
    assert blup_predict(vc, re, 99) == 0.0
    assert blup_predict(VarianceComponents(0.0, 1.0), re, 1) == 0.0


def test_input_checks():
    with pytest.raises(ValidationError):
        fit_intercept_lmm(np.ones(3), np.zeros(3), np.array([1.0, 0.0, 1.0]), np.array([1, 1, 2]))
    with pytest.raises(ValidationError):
        fit_intercept_lmm(np.array([1.0, np.nan]), np.zeros(2), np.ones(2), np.array([1, 2]))
    with pytest.raises(ValidationError):
        VarianceComponents(-1.0, 1.0)


@pytest.mark.parametrize(
    "old, new, expected",
    [(1.0, 1.0, 0.0), (2.0, 3.0, 0.5), (math.inf, math.inf, 0.0), (0.0, 0.25, 0.25), (-4.0, -2.0, 0.5)],
)
def test_relative_change(old, new, expected):
    assert relative_change(old, new) == expected
