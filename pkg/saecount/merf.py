"""
MERF
Alternates a forest fit on de-biased targets with a random-intercept
decomposition of the forest's out-of-bag residuals
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .data import Sample
from .errors import ValidationError
from .forest import Forest, ForestParams, fit_forest
from .lmm import RandomEffects, VarianceComponents, blup_predict, fit_intercept_lmm, relative_change
from .rng import RngHandle

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-5
DEFAULT_MAX_ITER = 100


def forest_learner(params: ForestParams) -> Callable:
    """Fixed-part learner backed by a regression forest"""

    def learn(X, t, w, rng):
        return fit_forest(X, t, w, params, rng)

    return learn


@dataclass(frozen=True, eq=False)
class MerfFit:
    """Converged (or last) state of a MERF run"""

    forest: Forest
    vc: VarianceComponents
    re: RandomEffects
    trace: List[float]
    converged: bool
    iterations: int
    covariates: tuple = ()
    sample_sizes: Dict[int, int] = field(default_factory=dict)


def fit_merf(
    sample: Sample,
    params: ForestParams = ForestParams(),
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    rng: RngHandle = RngHandle(0),
    init_re: Optional[RandomEffects] = None,
    learner: Optional[Callable] = None,
) -> MerfFit:
    """Fit MERF with identity link on the counts

    Args:
        sample: Survey sample
        params: Forest hyperparameters
        tol: Relative log-likelihood change that stops the loop
        max_iter: Iteration cap
        rng: Forest stream, reused by every iteration
        init_re: Optional starting random effects (zero otherwise)
        learner: Optional replacement for the forest fixed part

    Returns:
        MerfFit; `converged` is False when max_iter was hit
    """
    if sample.n == 0:
        raise ValidationError("cannot fit MERF on an empty sample")
    if max_iter < 1:
        raise ValidationError("max_iter must be >= 1")
    learn = learner or forest_learner(params)
    y = sample.y.astype(np.float64)
    ones = np.ones(sample.n)
    nu = (init_re or RandomEffects()).for_units(sample.domains)

    trace: List[float] = []
    converged = False
    vc, re = VarianceComponents(0.0, 0.0), init_re or RandomEffects()
    for iteration in range(1, max_iter + 1):
        forest = learn(sample.X, y - nu, ones, rng)
        oob = forest.oob_predictions()
        fit = fit_intercept_lmm(y, oob, ones, sample.domains, init=vc if vc.sigma2_eps > 0 else None)
        vc, re = fit.vc, fit.re
        nu = re.for_units(sample.domains)
        trace.append(fit.loglik)
        logger.debug(
            "merf iteration",
            extra={"event": "merf_iter", "iteration": iteration, "loglik": fit.loglik,
                   "sigma2_nu": vc.sigma2_nu},
        )
        if iteration > 1 and relative_change(trace[-2], trace[-1]) < tol:
            converged = True
            break

    if not converged:
        logger.warning(
            "merf did not converge", extra={"event": "merf_nonconverged", "iterations": len(trace)}
        )
    forest = learn(sample.X, y - nu, ones, rng)
    return MerfFit(
        forest=forest,
        vc=vc,
        re=re,
        trace=trace,
        converged=converged,
        iterations=len(trace),
        covariates=sample.covariates,
        sample_sizes=sample.domain_sizes(),
    )


def predict_unit_merf(fit: MerfFit, x, domain: int) -> float:
    """f(x) + nu_domain on the count scale, no link"""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return float(fit.forest.predict(x)[0] + blup_predict(fit.vc, fit.re, domain))
