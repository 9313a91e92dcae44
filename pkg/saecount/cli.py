"""
Command-line interface
saecount fit|predict|mse|simulate|diagnose|importance --config <file> [--seed N] [--threads K] [--out DIR]
"""

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from .commands import CommandExecutor
from .config import load_config
from .errors import SaeError
from .logs import configure_logging

logger = logging.getLogger(__name__)

EPILOG = """
Examples:
  saecount fit --config run.yaml --survey survey.csv --method gmerf
  saecount predict --artifact out/fit.pkl --census census.csv
  saecount mse --artifact out/fit.pkl --census census.csv --survey survey.csv --scheme parametric --B 100
  saecount simulate --scenario normal-poisson --M 50 --methods gmerf,merf,ebpp
  saecount simulate --list
  saecount diagnose --artifact out/fit.pkl --survey survey.csv
  saecount importance --artifact out/fit.pkl

Exit codes: 0 success, 2 invalid input or configuration, 3 non-convergence, 4 I/O error.
"""

# flags that feed the nested schema mapping rather than a top-level field
SCHEMA_FLAGS = ("domain", "outcome", "covariates")
# flags that are actions, not configuration
ACTION_FLAGS = ("list_scenarios",)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--seed", type=int, help="Top-level random seed")
    parser.add_argument("--threads", type=int, help="Worker processes for replicate loops")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")


def _schema(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--domain", help="Domain id column")
    parser.add_argument("--outcome", help="Outcome column of the survey")
    parser.add_argument("--covariates", help="Comma-separated covariate columns")


def _fitting(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--method", help="gmerf, merf or ebpp")
    parser.add_argument("--num-trees", dest="num_trees", type=int)
    parser.add_argument("--mtry", type=int)
    parser.add_argument("--min-node-size", dest="min_node_size", type=int)
    parser.add_argument("--tol", type=float, help="MERF convergence tolerance")
    parser.add_argument("--max-iter", dest="max_iter", type=int)
    parser.add_argument("--micro-tol", dest="micro_tol", type=float)
    parser.add_argument("--macro-tol", dest="macro_tol", type=float)
    parser.add_argument("--max-macro", dest="max_macro", type=int)
    parser.add_argument("--max-micro", dest="max_micro", type=int)
    parser.add_argument("--pql-tol", dest="pql_tol", type=float)
    parser.add_argument("--pql-max-iter", dest="pql_max_iter", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saecount",
        description="Unit-level small area estimation for counts with mixed effects random forests",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True

    fit = commands.add_parser("fit", help="Fit a model on a survey and save the artifact")
    _common(fit)
    _schema(fit)
    _fitting(fit)
    fit.add_argument("--survey", help="Survey CSV")
    fit.add_argument("--artifact", help="Where to write the fit (default <out>/fit.pkl)")
    fit.add_argument("--select-aic", dest="select_aic", action="store_true", default=None,
                     help="Forward AIC covariate selection before an ebpp fit")

    predict = commands.add_parser("predict", help="Domain means for every census domain")
    _common(predict)
    _schema(predict)
    predict.add_argument("--artifact", help="Fit artifact")
    predict.add_argument("--census", help="Census CSV")
    predict.add_argument("--survey", help="Survey CSV (required for ebpp)")
    predict.add_argument("--average", help="GMERF domain mean on the 'eta' or 'mu' scale")

    mse = commands.add_parser("mse", help="Bootstrap MSE of the domain means")
    _common(mse)
    _schema(mse)
    mse.add_argument("--artifact", help="Fit artifact")
    mse.add_argument("--census", help="Census CSV")
    mse.add_argument("--survey", help="Survey CSV")
    mse.add_argument("--scheme", help="parametric, nonparametric or merf-npc")
    mse.add_argument("--B", dest="B", type=int, help="Bootstrap replicates")

    simulate = commands.add_parser("simulate", help="Model-based or design-based simulation study")
    _common(simulate)
    _schema(simulate)
    _fitting(simulate)
    simulate.add_argument("--scenario", help="Scenario name (model-based)")
    simulate.add_argument("--scenarios-dir", dest="scenarios_dir", help="Directory of scenario YAML files")
    simulate.add_argument("--census", help="Census CSV with outcomes (design-based)")
    simulate.add_argument("--survey", help="Survey CSV whose domain sizes give the sampling plan")
    simulate.add_argument("--methods", help="Comma-separated methods (gmerf, merf, ebpp, direct)")
    simulate.add_argument("--schemes", help="Comma-separated bootstrap schemes")
    simulate.add_argument("--M", dest="M", type=int, help="Simulation replicates")
    simulate.add_argument("--B", dest="B", type=int, help="Bootstrap replicates")
    simulate.add_argument("--list", dest="list_scenarios", action="store_true", help="List scenarios and exit")

    diagnose = commands.add_parser("diagnose", help="Pearson residuals and overdispersion checks")
    _common(diagnose)
    _schema(diagnose)
    diagnose.add_argument("--artifact", help="Fit artifact")
    diagnose.add_argument("--survey", help="Survey CSV")

    importance = commands.add_parser("importance", help="Variable importance and partial dependence")
    _common(importance)
    importance.add_argument("--artifact", help="Fit artifact")
    importance.add_argument("--grid-size", dest="grid_size", type=int)

    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Flag values as a config layer; unset flags are left out"""
    values = {k: v for k, v in vars(args).items() if v is not None and k not in ACTION_FLAGS and k != "config"}
    schema = {k: values.pop(k) for k in SCHEMA_FLAGS if k in values}
    if "covariates" in schema:
        schema["covariates"] = [c.strip() for c in schema["covariates"].split(",") if c.strip()]
    if schema:
        values["schema"] = schema
    return values


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command, return its exit code"""
    args = build_parser().parse_args(argv)
    configure_logging("INFO")
    try:
        config = load_config(args.config, overrides_from_args(args))
    except SaeError as e:
        print(f"✗ {e}", file=sys.stderr)
        return e.exit_code
    configure_logging(config.log_level)
    logger.debug("configuration", extra={"event": "config", **config.to_dict()})

    executor = CommandExecutor()
    if getattr(args, "list_scenarios", False):
        try:
            return executor.list_scenarios(config)
        except SaeError as e:
            print(f"✗ {e}", file=sys.stderr)
            return e.exit_code
    return executor.execute(config)


if __name__ == "__main__":
    sys.exit(main())
