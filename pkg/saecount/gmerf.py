"""
GMERF
Doubly iterative PQL fit of a Poisson mixed model whose fixed part is a
regression forest: macro iterations refresh the linearized target and
weights, micro iterations run the weighted MERF pseudo-model
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .data import Sample
from .errors import DimensionError, ValidationError
from .forest import Forest, ForestParams
from .glm import design_matrix, fit_glm_poisson
from .lmm import RandomEffects, VarianceComponents, blup_predict, fit_intercept_lmm, relative_change
from .merf import forest_learner
from .rng import RngHandle

logger = logging.getLogger(__name__)

ETA_BOUND = 30.0
MU_FLOOR = 1e-8


@dataclass(frozen=True)
class WorkingState:
    """Linearized Poisson pseudo-response at the current linear predictor"""

    eta: np.ndarray
    mu: np.ndarray
    y_L: np.ndarray
    w: np.ndarray


@dataclass(frozen=True, eq=False)
class GmerfFit:
    """Fitted GMERF; `forest` is the in-bag refit at the final random effects"""

    forest: Forest
    vc: VarianceComponents
    re: RandomEffects
    macro_trace: List[float]
    micro_traces: List[List[float]]
    converged: bool
    micro_converged: List[bool]
    eta: np.ndarray = None
    covariates: tuple = ()
    sample_sizes: Dict[int, int] = field(default_factory=dict)

    @property
    def macro_iterations(self) -> int:
        return len(self.macro_trace)


def poisson_working_update(y, eta) -> WorkingState:
    """Working variable and weights of the Poisson log-link model

    mu = exp(eta), y_L = log(mu) + (y - mu) / mu and w = mu, with eta clamped
    to [-30, 30] and mu floored at 1e-8.
    """
    y = np.asarray(y, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if y.shape != eta.shape:
        raise DimensionError(f"counts have shape {y.shape}, linear predictor {eta.shape}")
    if not np.all(np.isfinite(eta)):
        raise ValidationError("linear predictor must be finite")
    clamped = np.clip(eta, -ETA_BOUND, ETA_BOUND)
    n_clamped = int(np.sum(clamped != eta))
    if n_clamped:
        logger.warning("linear predictor clamped", extra={"event": "eta_clamp", "units": n_clamped})
    mu = np.maximum(np.exp(clamped), MU_FLOOR)
    log_mu = np.log(mu)
    return WorkingState(eta=log_mu, mu=mu, y_L=log_mu + (y - mu) / mu, w=mu)


def init_glm_poisson(sample: Sample) -> np.ndarray:
    """Starting linear predictor from a Poisson GLM without random effects

    Falls back to the constant log(mean(y) + 0.5) when IRLS fails.
    """
    if sample.n == 0:
        raise ValidationError("cannot initialize on an empty sample")
    fallback = np.full(sample.n, math.log(float(sample.y.mean()) + 0.5))
    if not np.any(sample.y > 0):
        logger.info("all-zero counts, constant start", extra={"event": "glm_fallback", "reason": "zero"})
        return fallback
    try:
        fit = fit_glm_poisson(sample.X, sample.y, sample.covariates)
    except (ValueError, np.linalg.LinAlgError) as e:
        logger.warning("glm start failed", extra={"event": "glm_fallback", "reason": str(e)})
        return fallback
    if not fit.converged or not np.all(np.isfinite(fit.eta)):
        logger.warning("glm start diverged", extra={"event": "glm_fallback", "reason": "diverged"})
        return fallback
    return fit.eta


class LinearFixedPart:
    """Weighted least-squares fixed part x'beta

    Plugged in place of the forest it turns GMERF into a PQL Poisson GLMM.
    """

    def __init__(self, beta: np.ndarray, fitted: np.ndarray):
        self.beta = beta
        self._fitted = fitted

    @classmethod
    def fit(cls, X, t, w, rng=None) -> "LinearFixedPart":
        Z = design_matrix(X)
        sw = np.sqrt(np.asarray(w, dtype=np.float64))
        beta, *_ = np.linalg.lstsq(Z * sw[:, None], np.asarray(t) * sw, rcond=None)
        return cls(beta, Z @ beta)

    def predict(self, X) -> np.ndarray:
        return design_matrix(np.asarray(X, dtype=np.float64).reshape(-1, len(self.beta) - 1)) @ self.beta

    def oob_predictions(self) -> np.ndarray:
        return self._fitted


def _micro_loop(
    sample: Sample,
    state: WorkingState,
    nu: np.ndarray,
    vc: VarianceComponents,
    learn: Callable,
    rng: RngHandle,
    tol: float,
    max_iter: int,
):
    trace: List[float] = []
    converged = False
    re = RandomEffects()
    oob = None
    for _ in range(max_iter):
        fixed = learn(sample.X, state.y_L - nu, state.w, rng)
        oob = fixed.oob_predictions()
        fit = fit_intercept_lmm(state.y_L, oob, state.w, sample.domains, init=vc if vc.sigma2_eps > 0 else None)
        vc, re = fit.vc, fit.re
        nu = re.for_units(sample.domains)
        trace.append(fit.loglik)
        if len(trace) > 1 and relative_change(trace[-2], trace[-1]) < tol:
            converged = True
            break
    return oob, nu, vc, re, trace, converged


def fit_gmerf(
    sample: Sample,
    params: ForestParams = ForestParams(),
    micro_tol: float = 1e-5,
    macro_tol: float = 1e-3,
    max_macro: int = 30,
    max_micro: int = 100,
    rng: RngHandle = RngHandle(0),
    learner: Optional[Callable] = None,
    init_eta: Optional[np.ndarray] = None,
) -> GmerfFit:
    """Fit GMERF to Poisson counts

    Args:
        sample: Survey sample
        params: Forest hyperparameters
        micro_tol: Relative log-likelihood change ending a micro loop
        macro_tol: Max relative change of eta ending the macro loop
        max_macro: Macro iteration cap
        max_micro: Micro iteration cap per macro iteration
        rng: Forest stream, reused across iterations
        learner: Optional replacement for the forest fixed part
        init_eta: Optional starting linear predictor (GLM otherwise)

    Returns:
        GmerfFit with convergence flags per level
    """
    if sample.n == 0:
        raise ValidationError("cannot fit GMERF on an empty sample")
    if max_macro < 1 or max_micro < 1:
        raise ValidationError("iteration caps must be >= 1")
    learn = learner or forest_learner(params)
    y = sample.y.astype(np.float64)
    eta = init_glm_poisson(sample) if init_eta is None else np.asarray(init_eta, dtype=np.float64)
    nu = np.zeros(sample.n)
    vc = VarianceComponents(0.0, 0.0)
    re = RandomEffects()

    macro_trace: List[float] = []
    micro_traces: List[List[float]] = []
    micro_flags: List[bool] = []
    converged = False
    for macro in range(1, max_macro + 1):
        state = poisson_working_update(y, eta)
        oob, nu, vc, re, trace, micro_ok = _micro_loop(
            sample, state, nu, vc, learn, rng, micro_tol, max_micro
        )
        micro_traces.append(trace)
        micro_flags.append(micro_ok)
        eta_new = oob + nu
        change = float(np.max(np.abs(eta_new - eta) / (np.abs(eta) + 1.0)))
        macro_trace.append(change)
        eta = eta_new
        logger.debug(
            "gmerf macro iteration",
            extra={"event": "gmerf_macro", "iteration": macro, "eta_change": change,
                   "micro_iterations": len(trace), "sigma2_nu": vc.sigma2_nu},
        )
        if change < macro_tol:
            converged = True
            break

    if not converged:
        logger.warning(
            "gmerf did not converge", extra={"event": "gmerf_nonconverged", "macro": len(macro_trace)}
        )
    forest = learn(sample.X, state.y_L - nu, state.w, rng)
    return GmerfFit(
        forest=forest,
        vc=vc,
        re=re,
        macro_trace=macro_trace,
        micro_traces=micro_traces,
        converged=converged,
        micro_converged=micro_flags,
        eta=eta,
        covariates=sample.covariates,
        sample_sizes=sample.domain_sizes(),
    )


def predict_unit_gmerf(fit: GmerfFit, x, domain: int) -> Tuple[float, float]:
    """(eta, mu) for one unit; eta = f(x) + nu_domain, mu = exp(eta)"""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    eta = float(fit.forest.predict(x)[0] + blup_predict(fit.vc, fit.re, domain))
    return eta, math.exp(eta)
