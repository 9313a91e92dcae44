"""
Domain Mean Prediction
Census-level domain means for GMERF, MERF, EBPP and the direct estimator
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from . import ebpp
from .artifacts import write_table
from .data import Population, Sample
from .errors import DimensionError, ValidationError
from .gmerf import GmerfFit
from .merf import MerfFit

logger = logging.getLogger(__name__)

AVERAGES = ("eta", "mu")


@dataclass(frozen=True, eq=False)
class DomainEstimates:
    """One estimate per census domain, domains sorted ascending"""

    method: str
    domain_ids: Tuple[int, ...]
    estimate: np.ndarray
    in_sample: np.ndarray
    N: np.ndarray
    n: np.ndarray
    variance: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.domain_ids)

    def __getitem__(self, domain: int) -> float:
        return float(self.estimate[self.domain_ids.index(int(domain))])

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            {
                "domain_id": list(self.domain_ids),
                "method": self.method,
                "estimate": self.estimate,
                "in_sample": self.in_sample.astype(bool),
                "N_i": self.N,
                "n_i": self.n,
            }
        )
        if self.variance is not None:
            frame["variance"] = self.variance
        return frame


def _census_layout(population: Population, sample_sizes: Dict[int, int]):
    ids, inverse = np.unique(population.domains, return_inverse=True)
    missing = sorted(set(sample_sizes) - set(int(d) for d in ids))
    if missing:
        raise ValidationError(f"sampled domain(s) missing from the census: {missing}")
    N = np.bincount(inverse, minlength=len(ids))
    n = np.array([sample_sizes.get(int(d), 0) for d in ids], dtype=np.int64)
    return ids, inverse, N, n


def _check_covariates(population: Population, forest) -> None:
    if population.p != forest.p:
        raise DimensionError(f"census has {population.p} covariates, fit expects {forest.p}")


def gmerf_domain_means(fit: GmerfFit, population: Population, average: str = "eta") -> DomainEstimates:
    """mu_i = exp(mean over the census of f(x) + nu_i); nu_i omitted out of sample

    Args:
        fit: Fitted GMERF
        population: Census covariates for every unit
        average: "eta" exponentiates the averaged linear predictor;
            "mu" averages exp(f(x) + nu_i) over units instead

    Returns:
        DomainEstimates tagged "gmerf"
    """
    if average not in AVERAGES:
        raise ValidationError(f"average must be one of {AVERAGES}, got {average!r}")
    _check_covariates(population, fit.forest)
    ids, inverse, N, n = _census_layout(population, fit.sample_sizes)
    in_sample = n > 0
    nu = np.array([fit.re.get(d) if s else 0.0 for d, s in zip(ids, in_sample)])
    if fit.vc.sigma2_nu == 0:
        nu = np.zeros(len(ids))
    f = fit.forest.predict(population.X)
    if average == "eta":
        estimate = np.exp(np.bincount(inverse, weights=f, minlength=len(ids)) / N + nu)
    else:
        estimate = np.bincount(inverse, weights=np.exp(f + nu[inverse]), minlength=len(ids)) / N
    return DomainEstimates("gmerf", tuple(int(d) for d in ids), estimate, in_sample, N, n)


def merf_domain_means(fit: MerfFit, population: Population) -> DomainEstimates:
    """Census mean of f(x) plus nu_i, clamped at zero"""
    _check_covariates(population, fit.forest)
    ids, inverse, N, n = _census_layout(population, fit.sample_sizes)
    in_sample = n > 0
    nu = np.array([fit.re.get(d) if s else 0.0 for d, s in zip(ids, in_sample)])
    if fit.vc.sigma2_nu == 0:
        nu = np.zeros(len(ids))
    f = fit.forest.predict(population.X)
    raw = np.bincount(inverse, weights=f, minlength=len(ids)) / N + nu
    for k in np.flatnonzero(raw < 0):
        logger.warning(
            "negative domain mean clamped to 0",
            extra={"event": "merf_clamp", "domain": int(ids[k]), "unclamped": float(raw[k])},
        )
    return DomainEstimates("merf", tuple(int(d) for d in ids), np.maximum(raw, 0.0), in_sample, N, n)


def ebpp_domain_means(fit: "ebpp.GlmmFit", sample: Sample, population: Population) -> DomainEstimates:
    """EBPP means for every census domain"""
    sizes = sample.domain_sizes()
    ids, _, N, n = _census_layout(population, sizes)
    means = ebpp.ebpp_domain_means(fit, sample, population)
    estimate = np.array([means[int(d)] for d in ids])
    return DomainEstimates("ebpp", tuple(int(d) for d in ids), estimate, n > 0, N, n)


def direct_means(sample: Sample, population: Population) -> DomainEstimates:
    """Domain sample means with the SRSWOR variance s^2 / n (1 - n / N); NaN out of sample"""
    sizes = sample.domain_sizes()
    ids, _, N, n = _census_layout(population, sizes)
    estimate = np.full(len(ids), np.nan)
    variance = np.full(len(ids), np.nan)
    frame = pd.DataFrame({"domain": sample.domains, "y": sample.y.astype(np.float64)})
    grouped = frame.groupby("domain")["y"]
    means, s2 = grouped.mean(), grouped.var(ddof=1).fillna(0.0)
    for k, d in enumerate(ids):
        if n[k] == 0:
            continue
        estimate[k] = means[d]
        variance[k] = 0.0 if n[k] == 1 else s2[d] / n[k] * (1.0 - n[k] / N[k])
    return DomainEstimates("direct", tuple(int(d) for d in ids), estimate, n > 0, N, n, variance)


def domain_means(fit, population: Population, sample: Optional[Sample] = None, average: str = "eta") -> DomainEstimates:
    """Dispatch on the fit type"""
    if isinstance(fit, GmerfFit):
        return gmerf_domain_means(fit, population, average=average)
    if isinstance(fit, MerfFit):
        return merf_domain_means(fit, population)
    if isinstance(fit, ebpp.GlmmFit):
        if sample is None:
            raise ValidationError("EBPP prediction needs the survey sample")
        return ebpp_domain_means(fit, sample, population)
    raise ValidationError(f"unsupported fit type: {type(fit).__name__}")


def write_estimates(estimates: DomainEstimates, path: Union[str, Path], header: str = "") -> Path:
    return write_table(estimates.to_frame(), path, header)
