"""
Simulation Lab
Model-based and design-based harnesses with the evaluation metrics
for point and bootstrap MSE estimators
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .artifacts import write_table
from .bootstrap import SCHEMES, run_scheme
from .data import Population, Sample
from .errors import ConfigError, ConvergenceError, SaeError, ValidationError
from .fitting import METHODS, FitSettings, fit_model
from .forest import ForestParams
from .predict import direct_means, domain_means
from .rng import RngHandle, as_generator, published_plan, sample_negbinom, sample_poisson, stratified_srswor

logger = logging.getLogger(__name__)

PREDICTORS = ("linear", "interaction")
FAMILIES = ("poisson", "negbin")
NU_SD = 0.3
POINT = "none"
METRIC_COLUMNS = ("bias", "rmse", "rb_rmse", "rrmse_rmse")


@dataclass(frozen=True)
class Scenario:
    """Data-generating process of the model-based study"""

    name: str
    predictor: str = "linear"
    family: str = "poisson"
    nb_scale: Optional[float] = None
    n_domains: int = 50
    domain_size: int = 1000
    M: int = 50
    B: int = 100
    num_trees: int = 200
    description: str = ""

    def __post_init__(self):
        if self.predictor not in PREDICTORS:
            raise ConfigError(f"scenario {self.name}: predictor must be one of {PREDICTORS}")
        if self.family not in FAMILIES:
            raise ConfigError(f"scenario {self.name}: family must be one of {FAMILIES}")
        if self.family == "negbin" and not (self.nb_scale and self.nb_scale > 0):
            raise ConfigError(f"scenario {self.name}: negbin family needs a positive nb_scale")
        if self.n_domains < 1 or self.domain_size < 1 or self.M < 1 or self.B < 0:
            raise ConfigError(f"scenario {self.name}: sizes must be positive")

    @classmethod
    def builtin(cls, name: str) -> "Scenario":
        key = name.strip().lower()
        if key not in BUILTIN_SCENARIOS:
            raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(BUILTIN_SCENARIOS)}")
        return BUILTIN_SCENARIOS[key]

    def with_overrides(self, **overrides) -> "Scenario":
        unknown = set(overrides) - set(self.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario field(s): {sorted(unknown)}")
        return replace(self, **overrides)


BUILTIN_SCENARIOS: Dict[str, Scenario] = {
    "normal-poisson": Scenario("normal-poisson", "linear", "poisson"),
    "interaction-poisson": Scenario("interaction-poisson", "interaction", "poisson"),
    "nb3": Scenario("nb3", "interaction", "negbin", nb_scale=3.0),
    "nb1": Scenario("nb1", "interaction", "negbin", nb_scale=1.0),
}


def linear_predictor(predictor: str, x1, x2, nu):
    """eta = 2 + x1 + x2 + nu (linear) or 2 + 2 x1 x2 + x2^2 + nu (interaction)"""
    if predictor == "linear":
        return 2.0 + x1 + x2 + nu
    if predictor == "interaction":
        return 2.0 + 2.0 * x1 * x2 + x2**2 + nu
    raise ConfigError(f"unknown predictor {predictor!r}")


def design_census(rng, domain_sizes: Mapping[int, int], scenario: Scenario) -> Population:
    """Census with the scenario's covariates, random effects and outcome

    x1 ~ U(-1, 1), x2 ~ N(-1, 1), nu_i ~ N(0, 0.3^2); domains may differ in size.
    """
    gen = as_generator(rng)
    ids = sorted(int(d) for d in domain_sizes)
    sizes = np.array([int(domain_sizes[d]) for d in ids], dtype=np.int64)
    if np.any(sizes < 1):
        raise ValidationError("every census domain needs at least one unit")
    domains = np.repeat(np.array(ids, dtype=np.int64), sizes)
    N = int(sizes.sum())
    x1 = gen.uniform(-1.0, 1.0, size=N)
    x2 = gen.normal(-1.0, 1.0, size=N)
    nu = gen.normal(0.0, NU_SD, size=len(ids))
    eta = linear_predictor(scenario.predictor, x1, x2, np.repeat(nu, sizes))
    mu = np.exp(eta)
    if scenario.family == "poisson":
        y = sample_poisson(gen, mu)
    else:
        y = sample_negbinom(gen, mu, scenario.nb_scale)
    return Population(domains=domains, X=np.column_stack([x1, x2]), y=y, covariates=("x1", "x2"))


def generate_population(scenario: Scenario, rng) -> Population:
    """Population of n_domains x domain_size units; true means via `domain_means()`"""
    sizes = {d: scenario.domain_size for d in range(1, scenario.n_domains + 1)}
    return design_census(rng, sizes, scenario)


@dataclass(frozen=True, eq=False)
class SimReport:
    """Per-domain metrics for every method x scheme"""

    domains: pd.DataFrame
    M: int = 0
    failures: int = 0
    meta: Dict[str, object] = field(default_factory=dict)

    def summary(self) -> pd.DataFrame:
        """Median and mean of each metric over domains per method, scheme and in_sample"""
        grouped = self.domains.groupby(["method", "scheme", "in_sample"], sort=True)[list(METRIC_COLUMNS)]
        table = grouped.agg(["median", "mean"])
        table.columns = [f"{metric}_{stat}" for metric, stat in table.columns]
        return table.reset_index()

    def median(self, metric: str, method: str, scheme: str = POINT) -> float:
        rows = self.domains[(self.domains["method"] == method) & (self.domains["scheme"] == scheme)]
        return float(rows[metric].median())

    def write(self, out_dir: Union[str, Path], header: str = "") -> List[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, frame in (("sim_domains.csv", self.domains), ("sim_summary.csv", self.summary())):
            paths.append(write_table(frame, out_dir / name, header))
        text = out_dir / "sim_summary.txt"
        lines = [header] if header else []
        lines.append(f"replicates={self.M} failures={self.failures}")
        lines.append(self.summary().to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        text.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths.append(text)
        return paths


def metrics(
    estimates,
    truths,
    mse_estimates=None,
    domain_ids: Optional[Sequence[int]] = None,
    method: str = "",
    scheme: str = POINT,
    in_sample=None,
) -> SimReport:
    """BIAS, RMSE and, given bootstrap MSEs, RB-RMSE and RRMSE-RMSE per domain

    Args:
        estimates: M x D point estimates
        truths: M x D true domain means
        mse_estimates: Optional M x D bootstrap MSE estimates
        domain_ids: Labels of the D columns
        method: Method tag
        scheme: Bootstrap scheme tag
        in_sample: Optional D flags

    Returns:
        SimReport; the relative measures are NaN where RMSE is 0
    """
    estimates = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if estimates.shape != truths.shape:
        raise ValidationError(f"estimates {estimates.shape} and truths {truths.shape} differ")
    errors = estimates - truths
    bias = errors.mean(axis=0)
    rmse = np.sqrt(np.mean(errors**2, axis=0))
    rb = np.full(rmse.shape, np.nan)
    rr = np.full(rmse.shape, np.nan)
    if mse_estimates is not None:
        mse_estimates = np.atleast_2d(np.asarray(mse_estimates, dtype=np.float64))
        if mse_estimates.shape != estimates.shape:
            raise ValidationError("bootstrap MSE array does not match the estimates")
        ok = rmse > 0
        root = np.sqrt(mse_estimates[:, ok])
        rb[ok] = (np.sqrt(mse_estimates[:, ok].mean(axis=0)) - rmse[ok]) / rmse[ok]
        rr[ok] = np.sqrt(np.mean((root - rmse[ok]) ** 2, axis=0)) / rmse[ok]
    D = estimates.shape[1]
    frame = pd.DataFrame(
        {
            "method": method,
            "scheme": scheme,
            "domain_id": list(domain_ids) if domain_ids is not None else list(range(1, D + 1)),
            "in_sample": np.ones(D, dtype=bool) if in_sample is None else np.asarray(in_sample, dtype=bool),
            "bias": bias,
            "rmse": rmse,
            "rb_rmse": rb,
            "rrmse_rmse": rr,
        }
    )
    return SimReport(domains=frame, M=estimates.shape[0])


@dataclass(eq=False)
class _SimContext:
    mode: str
    methods: Tuple[str, ...]
    schemes: Tuple[str, ...]
    B: int
    settings: FitSettings
    rng: RngHandle
    plan: Dict[int, int]
    scenario: Optional[Scenario] = None
    census: Optional[Population] = None


@dataclass
class _ReplicateResult:
    truth: np.ndarray
    estimates: Dict[str, np.ndarray]
    mse: Dict[Tuple[str, str], np.ndarray]


_SIM_CONTEXT: Optional[_SimContext] = None


def _install(context: _SimContext) -> None:
    global _SIM_CONTEXT
    _SIM_CONTEXT = context


def _estimate(method: str, sample: Sample, population: Population, settings: FitSettings, rng: RngHandle):
    if method == "direct":
        return None, direct_means(sample, population).estimate
    fit = fit_model(method, sample, settings, rng)
    return fit, domain_means(fit, population, sample).estimate


def _sim_replicate(m: int) -> Optional[_ReplicateResult]:
    ctx = _SIM_CONTEXT
    gen = ctx.rng.child(m).generator
    try:
        if ctx.mode == "model":
            population = generate_population(ctx.scenario, gen)
        else:
            population = ctx.census
        ids = population.domain_ids
        truth_map = population.domain_means()
        sample = stratified_srswor(gen, population, ctx.plan)
        estimates: Dict[str, np.ndarray] = {}
        mse: Dict[Tuple[str, str], np.ndarray] = {}
        for k, method in enumerate(ctx.methods):
            fit, estimates[method] = _estimate(method, sample, population, ctx.settings, ctx.rng.child(m, 1, k))
            for s, scheme in enumerate(ctx.schemes):
                if SCHEMES[scheme] != method or ctx.B < 1:
                    continue
                report = run_scheme(
                    scheme, fit, sample, population, ctx.B, ctx.rng.child(m, 2, s), ctx.settings
                )
                mse[(method, scheme)] = report.mse
        logger.info("simulation replicate", extra={"event": "replicate", "mode": ctx.mode, "replicate": m})
        return _ReplicateResult(np.array([truth_map[d] for d in ids]), estimates, mse)
    except (SaeError, ArithmeticError, np.linalg.LinAlgError) as e:
        logger.warning(
            "simulation replicate failed",
            extra={"event": "replicate_failed", "replicate": m, "error": str(e)},
        )
        return None


def _check_methods(methods: Sequence[str], schemes: Sequence[str]) -> None:
    known = set(METHODS) | {"direct"}
    bad = [m for m in methods if m not in known]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; choose from {sorted(known)}")
    for scheme in schemes:
        if scheme not in SCHEMES:
            raise ConfigError(f"unknown bootstrap scheme {scheme!r}; choose from {sorted(SCHEMES)}")
        if SCHEMES[scheme] not in methods:
            raise ConfigError(f"scheme {scheme!r} needs method {SCHEMES[scheme]!r} in the run")


def _simulate(context: _SimContext, M: int, threads: int, domain_ids, in_sample) -> SimReport:
    if M < 1:
        raise ValidationError("simulation needs M >= 1")
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads, initializer=_install, initargs=(context,)) as executor:
            results = list(executor.map(_sim_replicate, range(M)))
    else:
        _install(context)
        results = [_sim_replicate(m) for m in range(M)]

    ok = [r for r in results if r is not None]
    failures = M - len(ok)
    if not ok:
        raise ConvergenceError(f"all {M} simulation replicates failed")
    truths = np.vstack([r.truth for r in ok])
    frames = []
    for method in context.methods:
        estimates = np.vstack([r.estimates[method] for r in ok])
        frames.append(metrics(estimates, truths, None, domain_ids, method, POINT, in_sample).domains)
        for scheme in context.schemes:
            if SCHEMES[scheme] != method or context.B < 1:
                continue
            mse = np.vstack([r.mse[(method, scheme)] for r in ok])
            frames.append(metrics(estimates, truths, mse, domain_ids, method, scheme, in_sample).domains)
    return SimReport(domains=pd.concat(frames, ignore_index=True), M=len(ok), failures=failures)


def _settings_for(scenario: Optional[Scenario], settings: Optional[FitSettings]) -> FitSettings:
    if settings is not None:
        return settings
    if scenario is not None:
        return FitSettings(params=ForestParams(num_trees=scenario.num_trees))
    return FitSettings()


def run_model_based(
    scenario: Scenario,
    methods: Sequence[str] = METHODS,
    schemes: Sequence[str] = (),
    M: Optional[int] = None,
    B: Optional[int] = None,
    rng: RngHandle = RngHandle(0),
    settings: Optional[FitSettings] = None,
    threads: int = 1,
) -> SimReport:
    """Regenerate the population each replicate, sample with the published plan, evaluate

    Args:
        scenario: Data-generating process
        methods: Estimators to evaluate (gmerf, merf, ebpp, direct)
        schemes: Bootstrap schemes to evaluate alongside their methods
        M: Replicates (scenario default otherwise)
        B: Bootstrap replicates (scenario default otherwise)
        rng: Stream; replicate m uses the child stream (m,)
        settings: Fit settings (scenario tree count otherwise)
        threads: Worker processes

    Returns:
        SimReport
    """
    methods, schemes = tuple(methods), tuple(schemes)
    _check_methods(methods, schemes)
    M = scenario.M if M is None else M
    B = scenario.B if B is None else B
    ids = list(range(1, scenario.n_domains + 1))
    plan = published_plan(ids, {d: scenario.domain_size for d in ids})
    context = _SimContext("model", methods, schemes, B, _settings_for(scenario, settings), rng, plan, scenario=scenario)
    report = _simulate(context, M, threads, ids, np.ones(len(ids), dtype=bool))
    return replace(report, meta={"mode": "model", "scenario": scenario.name, "B": B})


def run_design_based(
    census: Population,
    sample_plan: Mapping[int, int],
    methods: Sequence[str] = METHODS,
    M: int = 50,
    rng: RngHandle = RngHandle(0),
    schemes: Sequence[str] = (),
    B: int = 0,
    settings: Optional[FitSettings] = None,
    threads: int = 1,
) -> SimReport:
    """Repeated pseudo-samples from a fixed census; truths are the census domain means

    Domains absent from the plan (or planned with size 0) are out of sample in
    every replicate; report rows carry the in_sample flag.
    """
    if not census.has_outcome:
        raise ValidationError("design-based simulation needs outcomes for every census unit")
    methods, schemes = tuple(methods), tuple(schemes)
    _check_methods(methods, schemes)
    sizes = census.domain_sizes()
    missing = sorted(int(d) for d in sample_plan if int(d) not in sizes)
    if missing:
        raise ValidationError(f"sampling plan domain(s) missing from the census: {missing}")
    requested = {int(d): int(k) for d, k in sample_plan.items()}
    bad = [f"{d} ({k} of {sizes[d]})" for d, k in sorted(requested.items()) if not 0 <= k <= sizes[d]]
    if bad:
        raise ValidationError(f"sampling plan size outside [0, N_i] in domain(s): {', '.join(bad)}")
    plan = {d: k for d, k in requested.items() if k > 0}
    ids = census.domain_ids
    in_sample = np.array([d in plan for d in ids])
    context = _SimContext("design", methods, schemes, B, _settings_for(None, settings), rng, plan, census=census)
    report = _simulate(context, M, threads, ids, in_sample)
    return replace(
        report,
        meta={"mode": "design", "in_sample": int(in_sample.sum()), "out_of_sample": int((~in_sample).sum()), "B": B},
    )
