"""
Run Configuration
Layered settings: defaults < environment (.env) < YAML file < command-line flags
"""

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml
from dotenv import find_dotenv, load_dotenv

from .data import CsvSchema
from .errors import ConfigError, InputError
from .fitting import METHODS, FitSettings
from .forest import ForestParams

# environment variable -> (field, parser)
ENV_KEYS = {
    "SAECOUNT_SEED": ("seed", int),
    "SAECOUNT_THREADS": ("threads", int),
    "SAECOUNT_OUT": ("out", str),
    "SAECOUNT_LOG_LEVEL": ("log_level", str),
}
COMMANDS = ("fit", "predict", "mse", "simulate", "diagnose", "importance")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


@dataclass
class RunConfig:
    """Everything a command needs; validated before any computation"""

    command: str = ""
    survey: Optional[str] = None
    census: Optional[str] = None
    artifact: Optional[str] = None
    schema: Dict[str, Any] = field(
        default_factory=lambda: {"domain": "domain", "outcome": "y", "covariates": []}
    )
    method: str = "gmerf"
    num_trees: int = 500
    mtry: Optional[int] = None
    min_node_size: int = 5
    tol: float = 1e-5
    max_iter: int = 100
    micro_tol: float = 1e-5
    macro_tol: float = 1e-3
    max_macro: int = 30
    max_micro: int = 100
    pql_tol: float = 1e-6
    pql_max_iter: int = 200
    average: str = "eta"
    select_aic: bool = False
    scheme: Optional[str] = None
    B: int = 100
    M: Optional[int] = None
    scenario: Optional[str] = None
    scenarios_dir: Optional[str] = None
    methods: List[str] = field(default_factory=lambda: list(METHODS))
    schemes: List[str] = field(default_factory=list)
    grid_size: int = 20
    seed: int = 0
    threads: int = 1
    out: str = "out"
    log_level: str = "INFO"
    # keys some layer above the defaults set
    explicit_keys: Tuple[str, ...] = field(default=(), compare=False, repr=False)

    def is_set(self, name: str) -> bool:
        """True when the environment, the config file or a flag gave `name`"""
        return name in self.explicit_keys

    def csv_schema(self, with_outcome: bool = True) -> CsvSchema:
        schema = CsvSchema.from_dict(self.schema)
        return schema if with_outcome else schema.without_outcome()

    def forest_params(self) -> ForestParams:
        return ForestParams(
            num_trees=self.num_trees,
            mtry=self.mtry,
            min_node_size=self.min_node_size,
            n_jobs=1,
        )

    def fit_settings(self) -> FitSettings:
        return FitSettings(
            params=self.forest_params(),
            tol=self.tol,
            max_iter=self.max_iter,
            micro_tol=self.micro_tol,
            macro_tol=self.macro_tol,
            max_macro=self.max_macro,
            max_micro=self.max_micro,
            pql_tol=self.pql_tol,
            pql_max_iter=self.pql_max_iter,
        )

    def header(self) -> str:
        return f"saecount command={self.command} seed={self.seed}"

    def out_dir(self) -> Path:
        path = Path(self.out)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def validate(self) -> "RunConfig":
        """Reject invalid values and incompatible combinations"""
        if self.command and self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {list(METHODS)}, got {self.method!r}")
        if self.average not in ("eta", "mu"):
            raise ConfigError(f"average must be 'eta' or 'mu', got {self.average!r}")
        if self.log_level.upper() not in LOG_LEVELS:
            raise ConfigError(f"log_level must be one of {list(LOG_LEVELS)}")
        for name in ("num_trees", "min_node_size", "max_iter", "max_macro", "max_micro", "pql_max_iter",
                     "threads", "grid_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("tol", "micro_tol", "macro_tol", "pql_tol"):
            if not float(getattr(self, name)) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.mtry is not None and self.mtry < 1:
            raise ConfigError("mtry must be >= 1")
        if self.B < 0 or (self.M is not None and self.M < 1):
            raise ConfigError("B must be >= 0 and M >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        unknown = set(self.schema) - {"domain", "outcome", "covariates"}
        if unknown:
            raise ConfigError(f"unknown schema key(s): {sorted(unknown)}")
        if self.select_aic and self.method != "ebpp":
            raise ConfigError("select_aic applies to method 'ebpp' only")
        return self


FIELD_NAMES = {f.name for f in fields(RunConfig)} - {"explicit_keys"}


def _coerce(name: str, value: Any) -> Any:
    """Cast a flat value to the type of its RunConfig default"""
    default = RunConfig.__dataclass_fields__[name]
    current = default.default
    if value is None or current is None:
        return value
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value for {name}: {value!r}") from e
    return value


def _flatten(document: Dict[str, Any], source: str) -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in document.items():
        if key == "forest":
            if not isinstance(value, dict):
                raise ConfigError(f"{source}: 'forest' must be a mapping")
            for sub, sub_value in value.items():
                if sub not in ("num_trees", "mtry", "min_node_size"):
                    raise ConfigError(f"{source}: unknown key 'forest.{sub}'")
                flat[sub] = sub_value
        elif key == "schema":
            if not isinstance(value, dict):
                raise ConfigError(f"{source}: 'schema' must be a mapping")
            flat["schema"] = dict(value)
        elif key in FIELD_NAMES:
            flat[key] = value
        else:
            raise ConfigError(f"{source}: unknown key '{key}'")
    return flat


def _from_env() -> Dict[str, Any]:
    load_dotenv(find_dotenv(usecwd=True))
    values = {}
    for env_key, (name, parser) in ENV_KEYS.items():
        raw = os.getenv(env_key)
        if raw is None or raw == "":
            continue
        try:
            values[name] = parser(raw)
        except ValueError as e:
            raise ConfigError(f"environment variable {env_key} has invalid value {raw!r}") from e
    return values


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    try:
        document = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path.name}: invalid YAML: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError(f"{path.name}: config must be a mapping")
    return _flatten(document, path.name)


def load_config(path: Union[str, Path, None] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Build a validated RunConfig

    Args:
        path: Optional YAML config file
        overrides: Command-line values; None entries are ignored

    Returns:
        RunConfig
    """
    layers = [_from_env()]
    if path:
        layers.append(read_config_file(path))
    if overrides:
        layers.append(_flatten({k: v for k, v in overrides.items() if v is not None}, "command line"))

    config = RunConfig()
    explicit = set()
    for layer in layers:
        explicit.update(layer)
        if "schema" in layer:
            layer["schema"] = {**config.schema, **layer["schema"]}
        config = replace(config, **{k: _coerce(k, v) for k, v in layer.items()})
    if isinstance(config.methods, str):
        config.methods = [m.strip() for m in config.methods.split(",") if m.strip()]
    if isinstance(config.schemes, str):
        config.schemes = [s.strip() for s in config.schemes.split(",") if s.strip()]
    config.explicit_keys = tuple(sorted(explicit))
    return config.validate()
