"""
saecount - Core Package
Unit-level small area estimation for counts with mixed effects random forests
"""

from .bootstrap import MseReport, run_scheme
from .config import RunConfig, load_config
from .data import CsvSchema, Population, Sample, load_csv
from .ebpp import GlmmFit, fit_poisson_glmm_pql
from .errors import SaeError
from .fitting import FitSettings, fit_model
from .forest import Forest, ForestParams, fit_forest
from .gmerf import GmerfFit, fit_gmerf
from .merf import MerfFit, fit_merf
from .predict import DomainEstimates, domain_means
from .rng import RngHandle, make_rng
from .simlab import Scenario, SimReport, run_design_based, run_model_based

__all__ = [
    "CsvSchema",
    "DomainEstimates",
    "FitSettings",
    "Forest",
    "ForestParams",
    "GlmmFit",
    "GmerfFit",
    "MerfFit",
    "MseReport",
    "Population",
    "RngHandle",
    "RunConfig",
    "SaeError",
    "Sample",
    "Scenario",
    "SimReport",
    "domain_means",
    "fit_forest",
    "fit_gmerf",
    "fit_merf",
    "fit_model",
    "fit_poisson_glmm_pql",
    "load_config",
    "load_csv",
    "make_rng",
    "run_design_based",
    "run_model_based",
    "run_scheme",
]
