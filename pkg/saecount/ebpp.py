"""
EBPP
Poisson GLMM with a random intercept fit by penalized quasi-likelihood,
and the empirical best plug-in predictor of domain means
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .data import Population, Sample
from .errors import DimensionError, ValidationError
from .glm import check_full_rank, design_matrix, fit_glm_poisson, forward_aic
from .gmerf import init_glm_poisson, poisson_working_update
from .lmm import RandomEffects, VarianceComponents, blup_predict, fit_intercept_lmm

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GlmmFit:
    """PQL Poisson GLMM; beta includes the intercept first"""

    beta: np.ndarray
    vc: VarianceComponents
    re: RandomEffects
    converged: bool
    iterations: int = 0
    names: Tuple[str, ...] = ()

    @property
    def covariates(self) -> Tuple[str, ...]:
        return self.names[1:]

    def linear_predictor(self, X, domains=None) -> np.ndarray:
        eta = design_matrix(X) @ self.beta
        if domains is not None:
            eta = eta + self.re.for_units(domains)
        return eta

    def coefficient_table(self) -> pd.DataFrame:
        return pd.DataFrame({"term": list(self.names), "estimate": self.beta})


def _gls_beta(Z: np.ndarray, y: np.ndarray, w: np.ndarray, inverse: np.ndarray, vc: VarianceComponents):
    """GLS coefficients under the block covariance sigma2_nu * J + sigma2_eps * W^-1"""
    ZtWZ = Z.T @ (Z * w[:, None])
    ZtWy = Z.T @ (w * y)
    if vc.sigma2_nu > 0 and vc.sigma2_eps > 0:
        D = int(inverse.max()) + 1
        s_w = np.bincount(inverse, weights=w, minlength=D)
        a = np.zeros((D, Z.shape[1]))
        np.add.at(a, inverse, Z * w[:, None])
        b = np.bincount(inverse, weights=w * y, minlength=D)
        g = vc.sigma2_nu / (vc.sigma2_eps + vc.sigma2_nu * s_w)
        ZtWZ = ZtWZ - (a * g[:, None]).T @ a
        ZtWy = ZtWy - (a * g[:, None]).T @ b
    return np.linalg.solve(ZtWZ, ZtWy)


def fit_poisson_glmm_pql(
    sample: Sample, tol: float = 1e-6, max_iter: int = 200, init: Optional[GlmmFit] = None
) -> GlmmFit:
    """Fit log(mu_ij) = x_ij' beta + nu_i by PQL

    Each iteration linearizes the counts at the current linear predictor,
    solves GLS for beta and refits the random intercept on the working residuals.

    Args:
        sample: Survey sample
        tol: Relative parameter change that stops the loop
        max_iter: Iteration cap
        init: Earlier fit on the same covariates to restart from

    Returns:
        GlmmFit; `converged` False when max_iter was hit
    """
    if sample.n == 0:
        raise ValidationError("cannot fit a GLMM on an empty sample")
    Z = design_matrix(sample.X)
    names = ("(intercept)", *sample.covariates)
    check_full_rank(Z, names)
    y = sample.y.astype(np.float64)
    _, inverse = np.unique(sample.domains, return_inverse=True)

    if init is None:
        eta = init_glm_poisson(sample)
        vc = VarianceComponents(0.0, 0.0)
        re = RandomEffects()
        beta = np.zeros(Z.shape[1])
        nu = np.zeros(sample.n)
    else:
        if tuple(init.names) != names:
            raise DimensionError(f"warm start has terms {list(init.names)}, sample has {list(names)}")
        beta, vc, re = np.asarray(init.beta, dtype=np.float64), init.vc, init.re
        nu = re.for_units(sample.domains)
        eta = Z @ beta + nu
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        state = poisson_working_update(y, eta)
        beta_new = _gls_beta(Z, state.y_L, state.w, inverse, vc)
        fit = fit_intercept_lmm(
            state.y_L, Z @ beta_new, state.w, sample.domains, init=vc if vc.sigma2_eps > 0 else None
        )
        nu_new = fit.re.for_units(sample.domains)
        change = max(
            float(np.max(np.abs(beta_new - beta) / (np.abs(beta) + 1.0))),
            abs(fit.vc.sigma2_nu - vc.sigma2_nu) / (vc.sigma2_nu + 1.0),
            float(np.max(np.abs(nu_new - nu) / (np.abs(nu) + 1.0))),
        )
        beta, vc, re, nu = beta_new, fit.vc, fit.re, nu_new
        eta = Z @ beta + nu
        logger.debug(
            "pql iteration",
            extra={"event": "pql_iter", "iteration": iteration, "change": change, "sigma2_nu": vc.sigma2_nu},
        )
        if iteration > 1 and change < tol:
            converged = True
            break

    if not np.all(np.isfinite(beta)):
        raise ValidationError("PQL produced non-finite coefficients")
    if not converged:
        logger.warning("pql did not converge", extra={"event": "pql_nonconverged", "iterations": iteration})
    return GlmmFit(beta=beta, vc=vc, re=re, converged=converged, iterations=iteration, names=names)


def ebpp_domain_means(fit: GlmmFit, sample: Sample, population: Population) -> Dict[int, float]:
    """EBPP mean for every census domain

    Sampled units contribute their observed counts, the rest exp(x' beta + nu_i).
    When the sample carries census row links the non-sampled set is exact;
    otherwise the sampled units' predictions are subtracted from the census total.
    """
    if population.p != sample.p:
        raise DimensionError(f"census has {population.p} covariates, sample has {sample.p}")
    mu_pop = np.exp(fit.linear_predictor(population.X) + fit.re.for_units(population.domains))
    ids, inverse = np.unique(population.domains, return_inverse=True)
    position = {int(d): k for k, d in enumerate(ids)}
    N = np.bincount(inverse, minlength=len(ids)).astype(np.float64)
    total = np.bincount(inverse, weights=mu_pop, minlength=len(ids))

    sample_pos = np.array([position.get(int(d), -1) for d in sample.domains], dtype=np.int64)
    inside = sample_pos >= 0
    y_sum = np.bincount(sample_pos[inside], weights=sample.y[inside].astype(np.float64), minlength=len(ids))
    if sample.population_index is not None:
        mu_sampled = mu_pop[sample.population_index[inside]]
    else:
        eta_s = fit.linear_predictor(sample.X[inside])
        eta_s = eta_s + np.array([blup_predict(fit.vc, fit.re, d) for d in sample.domains[inside]])
        mu_sampled = np.exp(eta_s)
    mu_s_sum = np.bincount(sample_pos[inside], weights=mu_sampled, minlength=len(ids))

    means = (y_sum + total - mu_s_sum) / N
    return {int(d): float(m) for d, m in zip(ids, means)}


def ebpp_domain_mean(fit: GlmmFit, sample: Sample, population: Population, domain: int) -> float:
    """EBPP mean for one census domain"""
    if int(domain) not in population.domain_sizes():
        raise ValidationError(f"domain {domain} is not in the census")
    return ebpp_domain_means(fit, sample, population)[int(domain)]


def glm_coefficients(sample: Sample) -> np.ndarray:
    """Plain Poisson GLM coefficients for the sample, intercept first"""
    return fit_glm_poisson(sample.X, sample.y, sample.covariates).beta


def stepwise_aic(sample: Sample, max_terms: Optional[int] = None) -> List[str]:
    """Forward AIC selection on the working Poisson GLM, random effects ignored"""
    return forward_aic(sample.X, sample.y, sample.covariates, max_terms)
