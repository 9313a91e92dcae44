"""
Method dispatch
Shared fit settings and one entry point for the three estimators
"""

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import Sample
from .ebpp import fit_poisson_glmm_pql
from .errors import ConfigError, ValidationError
from .forest import ForestParams
from .gmerf import fit_gmerf
from .merf import fit_merf
from .rng import RngHandle

METHODS = ("gmerf", "merf", "ebpp")


@dataclass(frozen=True)
class FitSettings:
    """Hyperparameters and tolerances for every estimator"""

    params: ForestParams = ForestParams()
    tol: float = 1e-5
    max_iter: int = 100
    micro_tol: float = 1e-5
    macro_tol: float = 1e-3
    max_macro: int = 30
    max_micro: int = 100
    pql_tol: float = 1e-6
    pql_max_iter: int = 200

    def halved(self) -> "FitSettings":
        """Same settings with iteration caps halved (bootstrap refits)"""
        return replace(
            self,
            max_iter=max(1, self.max_iter // 2),
            max_macro=max(1, self.max_macro // 2),
            max_micro=max(1, self.max_micro // 2),
            pql_max_iter=max(1, self.pql_max_iter // 2),
        )


def fit_model(method: str, sample: Sample, settings: FitSettings = FitSettings(), rng: RngHandle = RngHandle(0)):
    """Fit one of gmerf, merf or ebpp"""
    if method == "gmerf":
        return fit_gmerf(
            sample,
            settings.params,
            settings.micro_tol,
            settings.macro_tol,
            settings.max_macro,
            settings.max_micro,
            rng=rng,
        )
    if method == "merf":
        return fit_merf(sample, settings.params, settings.tol, settings.max_iter, rng=rng)
    if method == "ebpp":
        return fit_poisson_glmm_pql(sample, settings.pql_tol, settings.pql_max_iter)
    raise ConfigError(f"unknown method {method!r}; choose from {list(METHODS)}")


def select_covariates(sample: Sample, names: Sequence[str]) -> Sample:
    """Sample restricted to the named covariates, in the given order"""
    missing = [n for n in names if n not in sample.covariates]
    if missing:
        raise ValidationError(f"unknown covariate(s): {missing}")
    columns = [sample.covariates.index(n) for n in names]
    return Sample(
        domains=sample.domains,
        X=sample.X[:, columns] if columns else np.zeros((sample.n, 0)),
        y=sample.y,
        covariates=tuple(names),
        population_index=sample.population_index,
    )
