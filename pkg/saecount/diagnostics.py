"""
Dispersion diagnostics
Pearson residuals, dispersion ratio, Dean's P_B score test and the
tables behind residual plots
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import pandas as pd
from scipy import stats

from .data import Sample
from .ebpp import GlmmFit
from .errors import DimensionError, ValidationError
from .gmerf import MU_FLOOR, GmerfFit
from .merf import MerfFit

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DispersionSummary:
    """Overdispersion summary of a fitted count model"""

    pearson: np.ndarray
    dispersion_ratio: float
    dean_pb: float
    dean_pb_pvalue: float
    df: int
    large_residuals: int
    nb_scale: float

    def to_dict(self) -> dict:
        return {
            "n": int(self.pearson.size),
            "df": self.df,
            "dispersion_ratio": self.dispersion_ratio,
            "dean_pb": self.dean_pb,
            "dean_pb_pvalue": self.dean_pb_pvalue,
            "large_residuals": self.large_residuals,
            "large_residual_share": self.large_residuals / self.pearson.size if self.pearson.size else 0.0,
            "nb_scale": self.nb_scale if math.isfinite(self.nb_scale) else None,
        }


def _pair(y, mu_hat) -> Tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    mu_hat = np.asarray(mu_hat, dtype=np.float64)
    if y.shape != mu_hat.shape:
        raise DimensionError(f"counts have shape {y.shape}, fitted means {mu_hat.shape}")
    if np.any(mu_hat <= 0) or not np.all(np.isfinite(mu_hat)):
        raise ValidationError("fitted means must be positive and finite")
    return y, mu_hat


def pearson_residuals(y, mu_hat) -> np.ndarray:
    y, mu_hat = _pair(y, mu_hat)
    return (y - mu_hat) / np.sqrt(mu_hat)


def residual_df(n: int, p: int, domains_in_sample: int) -> int:
    """n - (p + 1) - D for the dispersion ratio"""
    df = int(n) - (int(p) + 1) - int(domains_in_sample)
    if df <= 0:
        raise ValidationError(f"nonpositive residual degrees of freedom: {df}")
    return df


def dispersion_ratio(pearson, df: int) -> float:
    if df <= 0:
        raise ValidationError(f"degrees of freedom must be positive, got {df}")
    pearson = np.asarray(pearson, dtype=np.float64)
    return float(np.sum(pearson**2) / df)


def dean_pb_test(y, mu_hat) -> Tuple[float, float]:
    """Dean's P_B score statistic and its one-sided normal p-value"""
    y, mu_hat = _pair(y, mu_hat)
    if y.size == 0:
        raise ValidationError("Dean's test needs at least one unit")
    statistic = float(np.sum((y - mu_hat) ** 2 - y) / math.sqrt(2.0 * np.sum(mu_hat**2)))
    return statistic, float(stats.norm.sf(statistic))


def summarize_dispersion(y, mu_hat, p: int, domains) -> DispersionSummary:
    """Dispersion ratio, Dean's test, large-residual count and moment NB scale"""
    y, mu_hat = _pair(y, mu_hat)
    pearson = pearson_residuals(y, mu_hat)
    df = residual_df(y.size, p, np.unique(np.asarray(domains)).size)
    statistic, pvalue = dean_pb_test(y, mu_hat)
    excess = float(np.sum((y - mu_hat) ** 2 - mu_hat))
    return DispersionSummary(
        pearson=pearson,
        dispersion_ratio=dispersion_ratio(pearson, df),
        dean_pb=statistic,
        dean_pb_pvalue=pvalue,
        df=df,
        large_residuals=int(np.sum(np.abs(pearson) > 2)),
        nb_scale=float(np.sum(mu_hat**2) / excess) if excess > 0 else math.inf,
    )


def residual_histogram(pearson, bins: int = 30) -> pd.DataFrame:
    counts, edges = np.histogram(np.asarray(pearson, dtype=np.float64), bins=bins)
    return pd.DataFrame({"left": edges[:-1], "right": edges[1:], "count": counts})


def residuals_by_domain(pearson, domains) -> pd.DataFrame:
    """Five-number summary of the residuals in each domain"""
    frame = pd.DataFrame({"domain_id": np.asarray(domains), "r": np.asarray(pearson, dtype=np.float64)})
    grouped = frame.groupby("domain_id")["r"]
    summary = grouped.quantile([0.0, 0.25, 0.5, 0.75, 1.0]).unstack()
    summary.columns = ["min", "q1", "median", "q3", "max"]
    summary.insert(0, "n", grouped.size())
    return summary.reset_index()


def residuals_vs_fitted(y, mu_hat) -> pd.DataFrame:
    y, mu_hat = _pair(y, mu_hat)
    return pd.DataFrame({"fitted": mu_hat, "residual": y - mu_hat})


def conditional_means(fit, sample: Sample) -> np.ndarray:
    """Fitted unit means including the predicted random effects"""
    if not isinstance(fit, (GmerfFit, MerfFit, GlmmFit)):
        raise ValidationError(f"unsupported fit type: {type(fit).__name__}")
    nu = fit.re.for_units(sample.domains)
    if isinstance(fit, GmerfFit):
        return np.exp(fit.forest.predict(sample.X) + nu)
    if isinstance(fit, MerfFit):
        mu = fit.forest.predict(sample.X) + nu
        floored = int(np.sum(mu < MU_FLOOR))
        if floored:
            logger.warning("nonpositive fitted means floored", extra={"event": "mu_floor", "units": floored})
        return np.maximum(mu, MU_FLOOR)
    return np.exp(fit.linear_predictor(sample.X) + nu)


def n_parameters(fit) -> int:
    """Covariate count p entering the residual degrees of freedom"""
    if isinstance(fit, GlmmFit):
        return len(fit.beta) - 1
    return len(fit.covariates)
