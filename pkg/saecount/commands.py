"""
Commands
Registry of CLI commands and the executor that maps their errors to exit codes
"""

import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

import pandas as pd

from .artifacts import load_envelope, save_fit, write_json, write_table
from .bootstrap import SCHEMES, run_scheme
from .config import RunConfig
from .data import Population, Sample, load_csv
from .diagnostics import (
    conditional_means,
    n_parameters,
    pearson_residuals,
    residual_histogram,
    residuals_by_domain,
    summarize_dispersion,
)
from .ebpp import GlmmFit, stepwise_aic
from .errors import ConfigError, SaeError
from .fitting import fit_model, select_covariates
from .forest import importance_table, partial_dependence_table
from .gmerf import GmerfFit
from .merf import MerfFit
from .predict import domain_means, write_estimates
from .rng import make_rng, published_plan
from .scenarios import DEFAULT_DIRECTORY, ScenarioLoader, get_scenario
from .simlab import run_design_based, run_model_based

logger = logging.getLogger(__name__)

# independent top-level streams per command
FIT_STREAM = 0
MSE_STREAM = 1
SIMULATE_STREAM = 2

# default scheme per fitted method
DEFAULT_SCHEMES = {"gmerf": "parametric", "merf": "merf-npc"}


def fit_summary(method: str, fit, seed: int) -> Dict[str, Any]:
    """Variance components, iteration counts and convergence flags of a fit"""
    summary = {
        "method": method,
        "seed": seed,
        "covariates": list(fit.covariates),
        "converged": bool(fit.converged),
        "sigma2_nu": fit.vc.sigma2_nu,
        "sigma2_eps": fit.vc.sigma2_eps,
        "random_effects": {str(d): v for d, v in sorted(fit.re.nu.items())},
    }
    if isinstance(fit, GmerfFit):
        summary["macro_iterations"] = fit.macro_iterations
        summary["micro_iterations"] = [len(trace) for trace in fit.micro_traces]
        summary["micro_converged"] = [bool(flag) for flag in fit.micro_converged]
        summary["macro_trace"] = list(fit.macro_trace)
    elif isinstance(fit, MerfFit):
        summary["iterations"] = fit.iterations
        summary["trace"] = list(fit.trace)
    elif isinstance(fit, GlmmFit):
        summary["iterations"] = fit.iterations
        summary["beta"] = {name: float(b) for name, b in zip(fit.names, fit.beta)}
    return summary


class CommandExecutor:
    """Runs one configured command and reports its exit code"""

    def __init__(self, working_directory: Optional[str] = None, stream=None):
        """Initialize command executor

        Args:
            working_directory: Base directory for relative paths (defaults to cwd)
            stream: Where progress banners go (defaults to stdout)
        """
        self.working_directory = Path(working_directory or os.getcwd())
        self.stream = stream or sys.stdout

        # Command registry: name -> handler returning an exit code
        self.commands: Dict[str, Callable[[RunConfig], int]] = {
            "fit": self.cmd_fit,
            "predict": self.cmd_predict,
            "mse": self.cmd_mse,
            "simulate": self.cmd_simulate,
            "diagnose": self.cmd_diagnose,
            "importance": self.cmd_importance,
        }

    def execute(self, config: RunConfig) -> int:
        """Execute a command by name

        Args:
            config: Validated run configuration; `config.command` picks the handler

        Returns:
            Process exit code (0 success, 2 validation, 3 non-convergence, 4 I/O)
        """
        if config.command not in self.commands:
            self._say(f"✗ Unknown command '{config.command}'")
            return ConfigError.exit_code

        self._banner(f"saecount {config.command} (seed={config.seed})")
        try:
            code = self.commands[config.command](config)
        except SaeError as e:
            logger.error(str(e), extra={"event": "command_failed", "command": config.command,
                                        "error": type(e).__name__, "exit_code": e.exit_code})
            self._say(f"✗ {config.command} failed: {e}")
            return e.exit_code
        self._say(f"{'✓' if code == 0 else '✗'} {config.command} finished with exit code {code}")
        return code

    def _say(self, text: str) -> None:
        print(text, file=self.stream)

    def _banner(self, title: str) -> None:
        self._say("\n" + "=" * 60)
        self._say(title)
        self._say("=" * 60)

    def _resolve_path(self, path: str) -> Path:
        """Resolve a path relative to working directory

        Args:
            path: Path to resolve (relative or absolute)

        Returns:
            Resolved Path object
        """
        path_obj = Path(path)
        if not path_obj.is_absolute():
            path_obj = self.working_directory / path_obj
        return path_obj.resolve()

    def _out_dir(self, config: RunConfig) -> Path:
        out = self._resolve_path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        return out

    def _require(self, config: RunConfig, *names: str) -> None:
        missing = [name for name in names if not getattr(config, name)]
        if missing:
            raise ConfigError(f"{config.command} needs: {', '.join(missing)}")

    # ------------------------------------------------------------------
    # Inputs
    # ------------------------------------------------------------------

    def _load_survey(self, config: RunConfig, covariates=None) -> Sample:
        schema = config.csv_schema(with_outcome=True)
        if not schema.outcome:
            raise ConfigError("schema.outcome must name the survey outcome column")
        if covariates is not None:
            schema = replace(schema, covariates=tuple(covariates))
        return load_csv(self._resolve_path(config.survey), schema, kind="sample")

    def _load_census(self, config: RunConfig, covariates=None, with_outcome: bool = False) -> Population:
        schema = config.csv_schema(with_outcome=with_outcome)
        if covariates is not None:
            schema = replace(schema, covariates=tuple(covariates))
        return load_csv(self._resolve_path(config.census), schema, kind="population")

    def _load_envelope(self, config: RunConfig) -> Dict[str, Any]:
        self._require(config, "artifact")
        envelope = load_envelope(self._resolve_path(config.artifact))
        self._say(f"  ✓ Loaded {envelope['method']} fit from {config.artifact}")
        return envelope

    def _load_artifact(self, config: RunConfig) -> Tuple[str, Any]:
        envelope = self._load_envelope(config)
        return envelope["method"], envelope["fit"]

    # ------------------------------------------------------------------
    # Handlers
    # ------------------------------------------------------------------

    def cmd_fit(self, config: RunConfig) -> int:
        """Fit the configured method on the survey; exit 3 when it did not converge"""
        self._require(config, "survey")
        sample = self._load_survey(config)
        self._say(f"  ✓ Survey: {sample.n} units in {len(sample.domain_ids)} domains")

        if config.select_aic:
            selected = stepwise_aic(sample)
            sample = select_covariates(sample, selected)
            self._say(f"  ✓ AIC selected covariates: {', '.join(selected) or '(none)'}")

        settings = config.fit_settings()
        fit = fit_model(config.method, sample, settings, make_rng(config.seed, FIT_STREAM))
        out = self._out_dir(config)
        artifact = self._resolve_path(config.artifact) if config.artifact else out / "fit.pkl"
        save_fit(fit, artifact, config.method, sample.covariates, config.seed, settings)
        summary = fit_summary(config.method, fit, config.seed)
        write_json(summary, out / "fit_summary.json")
        self._say(f"  ✓ Artifact: {artifact}")

        if not fit.converged:
            logger.warning("fit did not converge", extra={"event": "not_converged", "method": config.method})
            self._say("  ✗ Fit did not converge; artifact written")
            return 3
        return 0

    def cmd_predict(self, config: RunConfig) -> int:
        """Domain means for every census domain"""
        self._require(config, "census")
        method, fit = self._load_artifact(config)
        population = self._load_census(config, fit.covariates)
        sample = None
        if method == "ebpp":
            self._require(config, "survey")
            sample = self._load_survey(config, fit.covariates)
        estimates = domain_means(fit, population, sample, average=config.average)
        path = write_estimates(estimates, self._out_dir(config) / "estimates.csv", config.header())
        out_of_sample = len(estimates) - int(estimates.in_sample.astype(bool).sum())
        self._say(f"  ✓ {len(estimates)} domain estimates ({out_of_sample} out of sample)")
        self._say(f"  ✓ Written: {path}")
        return 0

    def cmd_mse(self, config: RunConfig) -> int:
        """Bootstrap MSE of the fitted method's domain means"""
        self._require(config, "census", "survey")
        envelope = self._load_envelope(config)
        method, fit = envelope["method"], envelope["fit"]
        scheme = config.scheme or DEFAULT_SCHEMES.get(method)
        if scheme is None:
            raise ConfigError(f"no bootstrap scheme for method {method!r}; choose from {sorted(SCHEMES)}")
        if scheme not in SCHEMES:
            raise ConfigError(f"unknown bootstrap scheme {scheme!r}; choose from {sorted(SCHEMES)}")
        if SCHEMES[scheme] != method:
            raise ConfigError(f"scheme {scheme!r} requires a {SCHEMES[scheme]} fit, artifact holds {method}")

        sample = self._load_survey(config, fit.covariates)
        population = self._load_census(config, fit.covariates)
        report = run_scheme(
            scheme, fit, sample, population, config.B,
            make_rng(config.seed, MSE_STREAM), envelope.get("settings"), config.threads,
        )
        path = report.write_csv(self._out_dir(config) / "mse.csv", config.header())
        self._say(f"  ✓ {scheme} bootstrap: B={report.B}, failures={report.failures}")
        refit = report.refit_settings
        self._say(
            f"  ✓ Refits: num_trees={refit.params.num_trees}, iteration caps halved "
            f"(max_macro={refit.max_macro}, max_iter={refit.max_iter})"
        )
        self._say(f"  ✓ Written: {path}")
        return 0

    def list_scenarios(self, config: RunConfig) -> int:
        directory = self._resolve_path(config.scenarios_dir) if config.scenarios_dir else DEFAULT_DIRECTORY
        loader = ScenarioLoader(directory)
        metadata = loader.discover_scenarios()
        self._say("\nAvailable scenarios:")
        for name in loader.list_scenarios():
            self._say(f"\n• {name}")
            self._say(f"  {metadata[name]['description']}")
        return 0

    def cmd_simulate(self, config: RunConfig) -> int:
        """Model-based study for a scenario, design-based study for a census"""
        rng = make_rng(config.seed, SIMULATE_STREAM)
        methods, schemes = tuple(config.methods), tuple(config.schemes)
        if config.scenario:
            directory = self._resolve_path(config.scenarios_dir) if config.scenarios_dir else None
            scenario = get_scenario(config.scenario, directory, M=config.M)
            settings = config.fit_settings()
            if not config.is_set("num_trees"):
                settings = replace(settings, params=replace(settings.params, num_trees=scenario.num_trees))
            B = config.B if config.is_set("B") else scenario.B
            self._say(f"  ✓ Scenario {scenario.name}: D={scenario.n_domains}, N_i={scenario.domain_size}")
            report = run_model_based(
                scenario, methods, schemes, config.M, B if schemes else 0,
                rng, settings, config.threads,
            )
        elif config.census:
            census = self._load_census(config, with_outcome=True)
            if config.survey:
                plan = self._load_survey(config).domain_sizes()
            else:
                plan = published_plan(census.domain_ids, census.domain_sizes())
            self._say(f"  ✓ Census: {census.N} units, {len(plan)} sampled domains")
            report = run_design_based(
                census, plan, methods, config.M or 50, rng, schemes,
                config.B if schemes else 0, config.fit_settings(), config.threads,
            )
        else:
            raise ConfigError("simulate needs a scenario or a census")

        paths = report.write(self._out_dir(config), config.header())
        self._say(f"  ✓ Replicates: {report.M}, failures: {report.failures}")
        for path in paths:
            self._say(f"  ✓ Written: {path}")
        return 0

    def cmd_diagnose(self, config: RunConfig) -> int:
        """Pearson residuals and overdispersion checks on the survey"""
        self._require(config, "survey")
        method, fit = self._load_artifact(config)
        sample = self._load_survey(config, fit.covariates)
        mu_hat = conditional_means(fit, sample)
        summary = summarize_dispersion(sample.y, mu_hat, n_parameters(fit), sample.domains)

        out = self._out_dir(config)
        header = config.header()
        residuals = pearson_residuals(sample.y, mu_hat)
        table = pd.DataFrame({"domain_id": sample.domains, "y": sample.y, "fitted": mu_hat, "pearson": residuals})
        write_table(table, out / "residuals.csv", header)
        write_table(residual_histogram(residuals), out / "residual_histogram.csv", header)
        write_table(residuals_by_domain(residuals, sample.domains), out / "residuals_by_domain.csv", header)
        write_json({"method": method, "seed": config.seed, **summary.to_dict()}, out / "diagnostics.json")

        self._say(f"  ✓ Dispersion ratio: {summary.dispersion_ratio:.4f}")
        self._say(f"  ✓ Dean PB: {summary.dean_pb:.4f} (p={summary.dean_pb_pvalue:.4g})")
        return 0

    def cmd_importance(self, config: RunConfig) -> int:
        """Variable importance and partial dependence of a forest-based fit"""
        method, fit = self._load_artifact(config)
        if not isinstance(fit, (GmerfFit, MerfFit)):
            raise ConfigError(f"importance needs a gmerf or merf fit, artifact holds {method}")
        out = self._out_dir(config)
        names = list(fit.covariates)
        write_table(importance_table(fit.forest, names), out / "importance.csv", config.header())
        write_table(
            partial_dependence_table(fit.forest, names, config.grid_size),
            out / "partial_dependence.csv",
            config.header(),
        )
        self._say(f"  ✓ Importance for {len(names)} covariates written to {out}")
        return 0
