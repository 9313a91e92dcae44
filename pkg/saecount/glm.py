"""
Poisson GLM helpers
Design matrices, rank checks, IRLS fits and forward AIC selection
"""

import logging
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import statsmodels.api as sm
from statsmodels.tools.sm_exceptions import ConvergenceWarning as SmConvergenceWarning
from statsmodels.tools.sm_exceptions import PerfectSeparationWarning

from .errors import RankDeficiencyError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GlmFit:
    """Poisson GLM with log link, no random effects"""

    beta: np.ndarray
    eta: np.ndarray
    aic: float
    converged: bool
    names: Tuple[str, ...]


def design_matrix(X) -> np.ndarray:
    """Prepend an intercept column"""
    X = np.asarray(X, dtype=np.float64)
    return np.column_stack([np.ones(X.shape[0]), X])


def check_full_rank(Z: np.ndarray, names: Sequence[str]) -> None:
    """Raise RankDeficiencyError naming every column that adds no rank"""
    collinear: List[str] = []
    kept = np.zeros((Z.shape[0], 0))
    rank = 0
    for j, name in enumerate(names):
        candidate = np.column_stack([kept, Z[:, j]])
        new_rank = np.linalg.matrix_rank(candidate)
        if new_rank > rank:
            kept, rank = candidate, new_rank
        else:
            collinear.append(name)
    if collinear:
        raise RankDeficiencyError(
            f"design matrix is rank deficient; collinear column(s): {', '.join(collinear)}",
            columns=collinear,
        )


def fit_glm_poisson(X, y, names: Sequence[str] = (), max_iter: int = 100) -> GlmFit:
    """Fit log(mu) = intercept + X beta by IRLS

    Args:
        X: Covariates (n x p), intercept added here
        y: Counts
        names: Covariate names for the coefficient table
        max_iter: IRLS iteration cap

    Returns:
        GlmFit with `converged` False when statsmodels reports non-convergence
    """
    Z = design_matrix(X)
    names = ("(intercept)", *(names or [f"x{j + 1}" for j in range(Z.shape[1] - 1)]))
    check_full_rank(Z, names)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", SmConvergenceWarning)
        warnings.filterwarnings("ignore", category=PerfectSeparationWarning)
        result = sm.GLM(np.asarray(y, dtype=np.float64), Z, family=sm.families.Poisson()).fit(maxiter=max_iter)
    converged = bool(getattr(result, "converged", True)) and not any(
        issubclass(w.category, SmConvergenceWarning) for w in caught
    )
    beta = np.asarray(result.params, dtype=np.float64)
    return GlmFit(
        beta=beta,
        eta=Z @ beta,
        aic=float(result.aic),
        converged=converged and bool(np.all(np.isfinite(beta))),
        names=tuple(names),
    )


def forward_aic(X, y, names: Sequence[str], max_terms: Optional[int] = None) -> List[str]:
    """Forward selection of covariates by Poisson GLM AIC

    Starts from the intercept-only model and adds the covariate that lowers
    AIC most until no addition improves it.

    Returns:
        Selected covariate names in order of entry
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    names = list(names)
    selected: List[int] = []
    best_aic = fit_glm_poisson(X[:, []], y).aic
    limit = len(names) if max_terms is None else min(max_terms, len(names))
    while len(selected) < limit:
        trial = []
        for j in range(len(names)):
            if j in selected:
                continue
            columns = selected + [j]
            try:
                aic = fit_glm_poisson(X[:, columns], y).aic
            except RankDeficiencyError:
                continue
            trial.append((aic, j))
        if not trial:
            break
        aic, j = min(trial)
        if aic >= best_aic:
            break
        best_aic = aic
        selected.append(j)
        logger.info("covariate selected", extra={"event": "aic_step", "covariate": names[j], "aic": aic})
    return [names[j] for j in selected]
