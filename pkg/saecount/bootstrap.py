"""
Bootstrap MSE
Parametric and non-parametric GMERF schemes and the adjusted
non-parametric MERF scheme
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .artifacts import write_table
from .data import Population, Sample
from .errors import BootstrapError, ConfigError, SaeError, ValidationError
from .forest import ForestParams
from .fitting import FitSettings, fit_model
from .gmerf import GmerfFit
from .merf import MerfFit
from .predict import gmerf_domain_means, merf_domain_means
from .rng import RngHandle, srswr, stratified_srswor

logger = logging.getLogger(__name__)

# scheme name -> fit method it bootstraps
SCHEMES: Dict[str, str] = {
    "parametric": "gmerf",
    "nonparametric": "gmerf",
    "merf-npc": "merf",
}
MAX_FAILURE_SHARE = 0.10


@dataclass(frozen=True)
class ResidualDecomposition:
    """Two-level split of marginal residuals, rescaled for resampling"""

    z: np.ndarray
    domain_ids: Tuple[int, ...]
    zbar: np.ndarray
    z1_centered_scaled: np.ndarray
    z2_centered_scaled: np.ndarray
    level1_target: float


@dataclass(frozen=True, eq=False)
class MseReport:
    """Bootstrap MSE per census domain"""

    scheme: str
    domain_ids: Tuple[int, ...]
    mse: np.ndarray
    estimate: np.ndarray
    B: int
    failures: int = 0
    nonconverged: int = 0
    squared_errors: np.ndarray = field(default=None, repr=False)
    # settings the replicate refits ran with (iteration caps halved)
    refit_settings: Optional[FitSettings] = None

    @property
    def rmse(self) -> np.ndarray:
        return np.sqrt(self.mse)

    @property
    def cv(self) -> np.ndarray:
        """RMSE / |estimate|; NaN where the estimate is not positive"""
        out = np.full(self.mse.shape, np.nan)
        positive = self.estimate > 0
        out[positive] = self.rmse[positive] / np.abs(self.estimate[positive])
        return out

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "domain_id": list(self.domain_ids),
                "scheme": self.scheme,
                "mse": self.mse,
                "rmse": self.rmse,
                "cv": self.cv,
                "B": self.B,
                "failures": self.failures,
            }
        )

    def write_csv(self, path: Union[str, Path], header: str = "") -> Path:
        return write_table(self.to_frame(), path, header)


def center_scale_residuals(z, target_var: float) -> np.ndarray:
    """Center z and rescale it to empirical variance target_var (ddof 0)"""
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ValidationError("cannot rescale an empty residual vector")
    if target_var < 0:
        raise ValidationError(f"target variance must be >= 0, got {target_var}")
    centered = z - z.mean()
    variance = float(np.mean(centered**2))
    if variance == 0:
        if target_var > 0:
            logger.warning("zero-variance residuals rescaled to zeros", extra={"event": "zero_variance_rescale"})
        return np.zeros_like(z)
    return centered * np.sqrt(target_var / variance)


def decompose_residuals(z, domains, sigma2_nu: float) -> ResidualDecomposition:
    """Split residuals into domain means and within-domain deviations

    Level-1 deviations are rescaled to their n - D degrees-of-freedom variance,
    domain means to sigma2_nu.
    """
    z = np.asarray(z, dtype=np.float64)
    ids, inverse = np.unique(np.asarray(domains), return_inverse=True)
    counts = np.bincount(inverse)
    zbar = np.bincount(inverse, weights=z) / counts
    level1 = z - zbar[inverse]
    dof = z.size - ids.size
    level1_target = float(np.sum(level1**2) / dof) if dof > 0 else float(np.mean(level1**2))
    return ResidualDecomposition(
        z=z,
        domain_ids=tuple(int(d) for d in ids),
        zbar=zbar,
        z1_centered_scaled=center_scale_residuals(level1, level1_target),
        z2_centered_scaled=center_scale_residuals(zbar, sigma2_nu),
        level1_target=level1_target,
    )


def match_nearest(targets, predictors) -> np.ndarray:
    """Index of the nearest predictor for every target; ties go to the lower index"""
    targets = np.asarray(targets, dtype=np.float64)
    predictors = np.asarray(predictors, dtype=np.float64)
    if predictors.size == 0:
        raise ValidationError("no predictors to match against")
    order = np.argsort(predictors, kind="stable")
    ordered = predictors[order]
    pos = np.searchsorted(ordered, targets, side="left")
    right = np.clip(pos, 0, ordered.size - 1)
    left = np.clip(pos - 1, 0, ordered.size - 1)
    # first element of each run of equal values carries the lowest index
    left = np.searchsorted(ordered, ordered[left], side="left")
    d_left = np.abs(targets - ordered[left])
    d_right = np.abs(ordered[right] - targets)
    pick_left = (d_left < d_right) | ((d_left == d_right) & (order[left] < order[right]))
    return np.where(pick_left, order[left], order[right])


@dataclass(eq=False)
class _Context:
    scheme: str
    population: Population
    plan: Dict[int, int]
    rng: RngHandle
    settings: FitSettings
    f_pop: np.ndarray
    census_ids: np.ndarray
    census_inverse: np.ndarray
    sigma2_nu: float = 0.0
    sample_y: Optional[np.ndarray] = None
    predictors: Optional[np.ndarray] = None
    z1: Optional[np.ndarray] = None
    z2: Optional[np.ndarray] = None


_CONTEXT: Optional[_Context] = None


def _install(context: _Context) -> None:
    global _CONTEXT
    _CONTEXT = context


def _bootstrap_outcome(ctx: _Context, gen: np.random.Generator) -> np.ndarray:
    D, N = ctx.census_ids.size, ctx.f_pop.size
    if ctx.scheme == "parametric":
        nu = gen.normal(0.0, np.sqrt(ctx.sigma2_nu), size=D)
        return gen.poisson(np.exp(np.clip(ctx.f_pop + nu[ctx.census_inverse], -30, 30)))
    z1 = srswr(gen, ctx.z1, N)
    z2 = srswr(gen, ctx.z2, D)
    if ctx.scheme == "nonparametric":
        mu = np.exp(np.clip(ctx.f_pop + z2[ctx.census_inverse], -30, 30))
        target = mu + np.sqrt(mu) * z1
    else:
        target = ctx.f_pop + z2[ctx.census_inverse] + z1
    return ctx.sample_y[match_nearest(target, ctx.predictors)]


def _replicate(b: int):
    """Squared errors of replicate b, or None when the refit failed"""
    ctx = _CONTEXT
    try:
        gen = ctx.rng.child(b).generator
        y_b = _bootstrap_outcome(ctx, gen)
        population = ctx.population.with_outcome(y_b)
        truth = population.domain_means()
        sample = stratified_srswor(gen, population, ctx.plan)
        method = SCHEMES[ctx.scheme]
        fit = fit_model(method, sample, ctx.settings, rng=ctx.rng.child(b, 1))
        if method == "gmerf":
            estimates = gmerf_domain_means(fit, population)
        else:
            estimates = merf_domain_means(fit, population)
        errors = (estimates.estimate - np.array([truth[int(d)] for d in ctx.census_ids])) ** 2
        logger.info("bootstrap replicate", extra={"event": "replicate", "scheme": ctx.scheme, "replicate": b})
        return errors, bool(fit.converged)
    except (SaeError, ArithmeticError, np.linalg.LinAlgError) as e:
        logger.warning(
            "bootstrap replicate failed",
            extra={"event": "replicate_failed", "scheme": ctx.scheme, "replicate": b, "error": str(e)},
        )
        return None


def _run(context: _Context, B: int, threads: int, estimate: np.ndarray) -> MseReport:
    if B < 1:
        raise ValidationError("bootstrap needs B >= 1")
    refit = context.settings
    logger.info(
        "bootstrap refits use halved iteration caps",
        extra={"event": "refit_caps_halved", "scheme": context.scheme, "B": B,
               "num_trees": refit.params.num_trees, "max_iter": refit.max_iter,
               "max_macro": refit.max_macro, "max_micro": refit.max_micro},
    )
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads, initializer=_install, initargs=(context,)) as executor:
            results = list(executor.map(_replicate, range(B)))
    else:
        _install(context)
        results = [_replicate(b) for b in range(B)]

    ok = [r for r in results if r is not None]
    failures = B - len(ok)
    if not ok or failures > MAX_FAILURE_SHARE * B:
        raise BootstrapError(
            f"{failures} of {B} bootstrap replicates failed", failures=failures, attempted=B
        )
    squared = np.vstack([r[0] for r in ok])
    return MseReport(
        scheme=context.scheme,
        domain_ids=tuple(int(d) for d in context.census_ids),
        mse=squared.mean(axis=0),
        estimate=estimate,
        B=B,
        failures=failures,
        nonconverged=sum(1 for r in ok if not r[1]),
        squared_errors=squared,
        refit_settings=refit,
    )


def _base_context(scheme, fit, population: Population, plan, rng, settings) -> _Context:
    if population.p != fit.forest.p:
        raise ValidationError(f"census has {population.p} covariates, fit expects {fit.forest.p}")
    census_ids, census_inverse = np.unique(population.domains, return_inverse=True)
    settings = settings or FitSettings(params=getattr(fit.forest, "params", ForestParams()))
    return _Context(
        scheme=scheme,
        population=population,
        plan={int(d): int(k) for d, k in plan.items()},
        rng=rng,
        settings=settings.halved(),
        f_pop=fit.forest.predict(population.X),
        census_ids=census_ids,
        census_inverse=census_inverse,
        sigma2_nu=fit.vc.sigma2_nu,
    )


def parametric_bootstrap_gmerf(
    fit: GmerfFit,
    population: Population,
    sample_plan: Dict[int, int],
    B: int,
    rng: RngHandle,
    settings: Optional[FitSettings] = None,
    threads: int = 1,
) -> MseReport:
    """Parametric bootstrap: nu ~ N(0, sigma2_nu), y ~ Poisson(exp(f(x) + nu))

    Args:
        fit: Fitted GMERF
        population: Census covariates
        sample_plan: Sample size per domain for the replicate samples
        B: Number of replicates
        rng: Stream; replicate b uses the child stream (b,)
        settings: Refit hyperparameters (caps are halved)
        threads: Worker processes

    Returns:
        MseReport over census domains
    """
    if not isinstance(fit, GmerfFit):
        raise ConfigError("the parametric scheme bootstraps GMERF fits only")
    context = _base_context("parametric", fit, population, sample_plan, rng, settings)
    estimate = gmerf_domain_means(fit, population).estimate
    return _run(context, B, threads, estimate)


def nonparametric_bootstrap_gmerf(
    fit: GmerfFit,
    sample: Sample,
    population: Population,
    B: int,
    rng: RngHandle,
    settings: Optional[FitSettings] = None,
    threads: int = 1,
) -> MseReport:
    """Non-parametric GMERF bootstrap from rescaled Pearson residuals

    Synthetic counts mu + sqrt(mu) z are matched to the nearest sample-unit
    prediction exp(f + nu), whose observed count becomes the bootstrap outcome.
    """
    if not isinstance(fit, GmerfFit):
        raise ConfigError("the nonparametric scheme bootstraps GMERF fits only")
    context = _base_context("nonparametric", fit, population, sample.domain_sizes(), rng, settings)
    f_s = fit.forest.predict(sample.X)
    mu_s = np.exp(f_s)
    pearson = (sample.y - mu_s) / np.sqrt(mu_s)
    parts = decompose_residuals(pearson, sample.domains, fit.vc.sigma2_nu)
    context.z1, context.z2 = parts.z1_centered_scaled, parts.z2_centered_scaled
    context.sample_y = sample.y.copy()
    context.predictors = np.exp(f_s + fit.re.for_units(sample.domains))
    estimate = gmerf_domain_means(fit, population).estimate
    return _run(context, B, threads, estimate)


def nonparametric_bootstrap_merf(
    fit: MerfFit,
    sample: Sample,
    population: Population,
    B: int,
    rng: RngHandle,
    settings: Optional[FitSettings] = None,
    threads: int = 1,
) -> MseReport:
    """Adjusted non-parametric MERF bootstrap from rescaled raw residuals

    eta = f + zbar + z is matched to the nearest f + nu of the sample units.
    """
    if not isinstance(fit, MerfFit):
        raise ConfigError("the merf-npc scheme bootstraps MERF fits only")
    context = _base_context("merf-npc", fit, population, sample.domain_sizes(), rng, settings)
    f_s = fit.forest.predict(sample.X)
    parts = decompose_residuals(sample.y - f_s, sample.domains, fit.vc.sigma2_nu)
    context.z1, context.z2 = parts.z1_centered_scaled, parts.z2_centered_scaled
    context.sample_y = sample.y.copy()
    context.predictors = f_s + fit.re.for_units(sample.domains)
    estimate = merf_domain_means(fit, population).estimate
    return _run(context, B, threads, estimate)


def run_scheme(
    scheme: str,
    fit,
    sample: Sample,
    population: Population,
    B: int,
    rng: RngHandle,
    settings: Optional[FitSettings] = None,
    threads: int = 1,
) -> MseReport:
    """Dispatch a scheme by name after checking it matches the fit"""
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown bootstrap scheme {scheme!r}; choose from {sorted(SCHEMES)}")
    expected = GmerfFit if SCHEMES[scheme] == "gmerf" else MerfFit
    if not isinstance(fit, expected):
        raise ConfigError(f"scheme {scheme!r} requires a {SCHEMES[scheme]} fit")
    if scheme == "parametric":
        return parametric_bootstrap_gmerf(fit, population, sample.domain_sizes(), B, rng, settings, threads)
    if scheme == "nonparametric":
        return nonparametric_bootstrap_gmerf(fit, sample, population, B, rng, settings, threads)
    return nonparametric_bootstrap_merf(fit, sample, population, B, rng, settings, threads)


def report_table(reports: List[MseReport]) -> pd.DataFrame:
    return pd.concat([r.to_frame() for r in reports], ignore_index=True)
