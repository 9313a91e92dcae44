"""
Random-Intercept Linear Mixed Model
Weighted ML variance components, BLUPs and the exact marginal log-likelihood
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np
from scipy import optimize

from .errors import ConvergenceError, DimensionError, ValidationError

logger = logging.getLogger(__name__)

SIGMA2_NU_FLOOR = 1e-12
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class VarianceComponents:
    """Random-intercept and level-1 variances"""

    sigma2_nu: float
    sigma2_eps: float

    def __post_init__(self):
        for name in ("sigma2_nu", "sigma2_eps"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValidationError(f"{name} must be finite and >= 0, got {value}")


@dataclass(frozen=True)
class RandomEffects:
    """Predicted random intercepts keyed by domain; unseen domains map to 0"""

    nu: Dict[int, float] = field(default_factory=dict)

    def get(self, domain: int) -> float:
        return float(self.nu.get(int(domain), 0.0))

    def for_units(self, domains: Iterable[int]) -> np.ndarray:
        return np.array([self.get(d) for d in np.asarray(domains).tolist()], dtype=np.float64)


@dataclass(frozen=True)
class LmmFit:
    """Result of one random-intercept fit

    Unpacks as (vc, re, loglik).
    """

    vc: VarianceComponents
    re: RandomEffects
    loglik: float
    loglik_init: float = -math.inf
    optimizer: str = "nelder-mead"

    def __iter__(self):
        return iter((self.vc, self.re, self.loglik))


@dataclass(frozen=True)
class _DomainSums:
    labels: np.ndarray
    inverse: np.ndarray
    n: int
    sum_log_w: float
    s_w: np.ndarray
    s_wr: np.ndarray
    s_wrr: np.ndarray


def _prepare(target, offset, weights, domains) -> _DomainSums:
    target = np.asarray(target, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    domains = np.asarray(domains)
    n = target.shape[0]
    for name, array in (("offset", offset), ("weights", weights), ("domains", domains)):
        if array.shape != (n,):
            raise DimensionError(f"{name} has shape {array.shape}, expected ({n},)")
    if n == 0:
        raise ValidationError("cannot fit a mixed model on zero rows")
    if not (np.all(np.isfinite(target)) and np.all(np.isfinite(offset)) and np.all(np.isfinite(weights))):
        raise ValidationError("mixed-model inputs must be finite")
    if np.any(weights <= 0):
        raise ValidationError("mixed-model weights must be positive")

    r = target - offset
    labels, inverse = np.unique(domains, return_inverse=True)
    return _DomainSums(
        labels=labels,
        inverse=inverse,
        n=n,
        sum_log_w=float(np.log(weights).sum()),
        s_w=np.bincount(inverse, weights=weights),
        s_wr=np.bincount(inverse, weights=weights * r),
        s_wrr=np.bincount(inverse, weights=weights * r * r),
    )


def _loglik(sums: _DomainSums, sigma2_nu: float, sigma2_eps: float) -> float:
    if sigma2_eps <= 0:
        if np.all(sums.s_wrr == 0):
            return math.inf
        raise ValidationError("singular covariance: level-1 variance is 0 with nonzero residuals")
    ratio = sigma2_nu / sigma2_eps
    shrink = 1.0 + ratio * sums.s_w
    quad = sums.s_wrr / sigma2_eps - (sums.s_wr / sigma2_eps) ** 2 * sigma2_nu / shrink
    logdet = sums.n * math.log(sigma2_eps) - sums.sum_log_w + np.log(shrink).sum()
    return float(-0.5 * (sums.n * _LOG_2PI + logdet + quad.sum()))


def marginal_loglik(vc: VarianceComponents, target, offset, weights, domains) -> float:
    """Exact Gaussian marginal log-likelihood of r = target - offset

    The covariance is block-diagonal with blocks sigma2_nu * J + sigma2_eps * W^-1;
    each block is handled with the rank-one Woodbury identity.
    """
    return _loglik(_prepare(target, offset, weights, domains), vc.sigma2_nu, vc.sigma2_eps)


def _profile_eps(sums: _DomainSums, ratio: float) -> float:
    return float((sums.s_wrr - sums.s_wr**2 * ratio / (1.0 + ratio * sums.s_w)).sum() / sums.n)


def _moments(sums: _DomainSums):
    """Method-of-moments split into between and within domain variance"""
    means = sums.s_wr / sums.s_w
    within_ss = float((sums.s_wrr - sums.s_wr * means).sum())
    dof = max(sums.n - len(sums.labels), 1)
    eps0 = max(within_ss, 0.0) / dof
    total = float(sums.s_wrr.sum() / sums.s_w.sum())
    base = max(total, 1e-8)
    between = float(np.var(means)) if len(means) > 1 else 0.0
    nu0 = between - eps0 * float(np.mean(1.0 / sums.s_w))
    return max(nu0, 1e-3 * base), max(eps0, 1e-3 * base)


def _blup(sums: _DomainSums, vc: VarianceComponents) -> RandomEffects:
    if vc.sigma2_nu == 0:
        return RandomEffects({int(d): 0.0 for d in sums.labels})
    nu = vc.sigma2_nu * sums.s_wr / (vc.sigma2_eps + vc.sigma2_nu * sums.s_w)
    return RandomEffects({int(d): float(v) for d, v in zip(sums.labels, nu)})


def fit_intercept_lmm(
    target,
    offset,
    weights,
    domains,
    init: Optional[VarianceComponents] = None,
    max_restarts: int = 2,
) -> LmmFit:
    """Fit r_ij = nu_i + e_ij with e_ij ~ N(0, sigma2_eps / w_ij), nu_i ~ N(0, sigma2_nu)

    Args:
        target: Response (n)
        offset: Fixed part subtracted from the target (n)
        weights: Positive precision weights (n)
        domains: Domain label per row (n)
        init: Optional starting point; method of moments otherwise
        max_restarts: Nelder-Mead restarts before the profiled scalar search

    Returns:
        LmmFit with ML variance components, BLUPs and the achieved log-likelihood
    """
    sums = _prepare(target, offset, weights, domains)
    if np.all(sums.s_wrr == 0):
        vc = VarianceComponents(0.0, 0.0)
        return LmmFit(vc, _blup(sums, vc), math.inf, math.inf, "degenerate")

    if init is not None and init.sigma2_eps > 0:
        nu0, eps0 = max(init.sigma2_nu, SIGMA2_NU_FLOOR), init.sigma2_eps
    else:
        nu0, eps0 = _moments(sums)
    loglik_init = _loglik(sums, nu0, eps0)

    def objective(theta):
        nu = max(math.exp(min(theta[0], 700.0)), SIGMA2_NU_FLOOR)
        eps = math.exp(min(theta[1], 700.0))
        value = _loglik(sums, nu, eps)
        return -value if math.isfinite(value) else math.inf

    candidates = [(loglik_init, nu0, eps0, "init")]
    start = np.log([nu0, eps0])
    for attempt in range(max_restarts + 1):
        result = optimize.minimize(
            objective,
            start,
            method="Nelder-Mead",
            options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 4000},
        )
        if np.all(np.isfinite(result.x)) and math.isfinite(result.fun):
            nu, eps = max(math.exp(result.x[0]), SIGMA2_NU_FLOOR), math.exp(result.x[1])
            candidates.append((-float(result.fun), nu, eps, "nelder-mead"))
        if result.success:
            break
        logger.debug("nelder-mead restart", extra={"event": "lmm_restart", "attempt": attempt + 1})
        start = result.x

    if not result.success or len(candidates) == 1:

        def profiled(log_ratio):
            ratio = math.exp(log_ratio)
            eps = _profile_eps(sums, ratio)
            if eps <= 0:
                return math.inf
            return -_loglik(sums, ratio * eps, eps)

        scalar = optimize.minimize_scalar(profiled, bounds=(-28.0, 12.0), method="bounded")
        if math.isfinite(scalar.fun):
            ratio = math.exp(scalar.x)
            eps = _profile_eps(sums, ratio)
            candidates.append((-float(scalar.fun), ratio * eps, eps, "profile"))

    eps_boundary = _profile_eps(sums, 0.0)
    if eps_boundary > 0:
        candidates.append((_loglik(sums, 0.0, eps_boundary), 0.0, eps_boundary, "boundary"))

    finite = [c for c in candidates if math.isfinite(c[0])]
    if not finite:
        raise ConvergenceError("variance-component optimization produced no finite log-likelihood")
    loglik, nu, eps, method = max(finite, key=lambda c: c[0])
    if nu <= SIGMA2_NU_FLOOR * 10:
        nu = 0.0
        loglik = _loglik(sums, 0.0, eps)
    vc = VarianceComponents(float(nu), float(eps))
    return LmmFit(vc, _blup(sums, vc), float(loglik), float(loglik_init), method)


def blup_predict(vc: VarianceComponents, re: RandomEffects, domain: int) -> float:
    """Predicted random effect for a domain; 0 when unseen or sigma2_nu is 0"""
    if vc.sigma2_nu == 0:
        return 0.0
    return re.get(domain)


def relative_change(old: float, new: float) -> float:
    """|new - old| / |old| with equal values (infinities included) giving 0"""
    if old == new:
        return 0.0
    if not (math.isfinite(old) and math.isfinite(new)):
        return math.inf
    if old == 0:
        return abs(new)
    return abs(new - old) / abs(old)
