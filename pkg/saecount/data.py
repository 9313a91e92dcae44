"""
Data Model
Unit-level containers for census (Population) and survey (Sample) files
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .errors import DimensionError, InputError, ParseError, SchemaError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UnitData:
    """A single population or survey unit"""

    domain_id: int
    x: Tuple[float, ...]
    y: Optional[int] = None


@dataclass(frozen=True)
class CsvSchema:
    """Column-name mapping for CSV ingestion

    `outcome` is None for census files that carry no outcome.
    """

    domain: str
    covariates: Tuple[str, ...]
    outcome: Optional[str] = None

    @classmethod
    def from_dict(cls, mapping: Dict) -> "CsvSchema":
        covariates = mapping.get("covariates") or []
        if isinstance(covariates, str):
            covariates = [c.strip() for c in covariates.split(",") if c.strip()]
        return cls(
            domain=mapping.get("domain", "domain"),
            covariates=tuple(covariates),
            outcome=mapping.get("outcome"),
        )

    def without_outcome(self) -> "CsvSchema":
        return CsvSchema(domain=self.domain, covariates=self.covariates, outcome=None)


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class _UnitTable:
    """Shared storage: domain labels, covariate matrix, optional counts"""

    domains: np.ndarray
    X: np.ndarray
    y: Optional[np.ndarray] = None
    covariates: Tuple[str, ...] = ()

    def __post_init__(self):
        domains = np.asarray(self.domains)
        if domains.ndim != 1:
            raise DimensionError("domain labels must be a 1-D vector")
        if domains.size and not np.issubdtype(domains.dtype, np.integer):
            if not np.all(np.equal(np.mod(domains, 1), 0)):
                raise ValidationError("domain labels must be integers")
        domains = domains.astype(np.int64)

        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if domains.size else X.reshape(0, max(len(self.covariates), 0))
        if X.ndim != 2 or X.shape[0] != domains.shape[0]:
            raise DimensionError(
                f"covariate matrix has shape {X.shape}, expected ({domains.shape[0]}, p)"
            )
        if not np.all(np.isfinite(X)):
            raise ValidationError("covariates must be finite")

        y = self.y
        if y is not None:
            y = np.asarray(y)
            if y.shape != domains.shape:
                raise DimensionError("outcome length differs from number of units")
            if y.size and (np.any(y < 0) or not np.all(np.equal(np.mod(y, 1), 0))):
                raise ValidationError("outcomes must be nonnegative integers")
            y = y.astype(np.int64)

        covariates = tuple(self.covariates) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(covariates) != X.shape[1]:
            raise DimensionError(
                f"{len(covariates)} covariate names for {X.shape[1]} covariate columns"
            )

        object.__setattr__(self, "domains", _readonly(domains))
        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "y", None if y is None else _readonly(y))
        object.__setattr__(self, "covariates", covariates)

    def __len__(self) -> int:
        return int(self.domains.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    @property
    def has_outcome(self) -> bool:
        return self.y is not None

    @property
    def domain_ids(self) -> List[int]:
        """Sorted distinct domain labels"""
        return [int(d) for d in np.unique(self.domains)]

    def domain_sizes(self) -> Dict[int, int]:
        ids, counts = np.unique(self.domains, return_counts=True)
        return {int(d): int(c) for d, c in zip(ids, counts)}

    def units(self) -> Iterator[UnitData]:
        for pos in range(len(self)):
            yield UnitData(
                domain_id=int(self.domains[pos]),
                x=tuple(float(v) for v in self.X[pos]),
                y=None if self.y is None else int(self.y[pos]),
            )


@dataclass(frozen=True, eq=False)
class Population(_UnitTable):
    """Census of N units partitioned into D domains

    The outcome is optional: present for synthetic or design-based censuses,
    absent for real covariate-only census files.
    """

    @property
    def N(self) -> int:
        return len(self)

    def with_outcome(self, y: np.ndarray) -> "Population":
        return Population(domains=self.domains, X=self.X, y=y, covariates=self.covariates)

    def domain_means(self) -> Dict[int, float]:
        """True domain means of the outcome"""
        if self.y is None:
            raise ValidationError("population has no outcome column")
        ids, inverse = np.unique(self.domains, return_inverse=True)
        sums = np.bincount(inverse, weights=self.y.astype(np.float64))
        counts = np.bincount(inverse)
        return {int(d): float(s / c) for d, s, c in zip(ids, sums, counts)}


@dataclass(frozen=True, eq=False)
class Sample(_UnitTable):
    """Survey sample of n units with observed counts

    `population_index` links each sampled unit to its census row when the
    sample was drawn from a known Population (simulation); None otherwise.
    """

    population_index: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.y is None:
            raise ValidationError("a sample requires an outcome for every unit")
        super().__post_init__()
        if self.population_index is not None:
            index = np.asarray(self.population_index, dtype=np.int64)
            if index.shape != self.domains.shape:
                raise DimensionError("population_index length differs from sample size")
            object.__setattr__(self, "population_index", _readonly(index))

    @property
    def n(self) -> int:
        return len(self)

    def check_against(self, population: Population) -> None:
        """Validate n_i <= N_i and covariate count against a census"""
        if population.p != self.p:
            raise DimensionError(
                f"census has {population.p} covariates, sample has {self.p}"
            )
        census_sizes = population.domain_sizes()
        for domain, n_i in self.domain_sizes().items():
            if domain in census_sizes and n_i > census_sizes[domain]:
                raise ValidationError(
                    f"domain {domain}: sample size {n_i} exceeds census size {census_sizes[domain]}"
                )


def domain_index(data: _UnitTable) -> Dict[int, np.ndarray]:
    """Map each domain id to the positions of its units

    Buckets are ordered by first appearance of the domain in the data.
    """
    domains = np.asarray(data.domains)
    if domains.size == 0:
        return {}
    ids, first = np.unique(domains, return_index=True)
    index: Dict[int, np.ndarray] = {}
    for domain in ids[np.argsort(first)]:
        index[int(domain)] = np.flatnonzero(domains == domain)
    return index


def _parse_numeric(frame: pd.DataFrame, column: str) -> np.ndarray:
    values = pd.to_numeric(frame[column].str.strip(), errors="coerce")
    bad = np.flatnonzero(values.isna().to_numpy())
    if bad.size:
        row = int(bad[0]) + 1
        raise ParseError(
            f"row {row}: column '{column}' value {frame[column].iloc[bad[0]]!r} is not numeric",
            row=row,
            column=column,
        )
    return values.to_numpy(dtype=np.float64)


def _parse_counts(frame: pd.DataFrame, column: str) -> np.ndarray:
    values = _parse_numeric(frame, column)
    bad = np.flatnonzero((values < 0) | (values != np.floor(values)))
    if bad.size:
        row = int(bad[0]) + 1
        raise ParseError(
            f"row {row}: column '{column}' value {frame[column].iloc[bad[0]]!r} "
            "is not a nonnegative integer",
            row=row,
            column=column,
        )
    return values.astype(np.int64)


def load_csv(
    path: Union[str, Path], schema: CsvSchema, kind: str = "auto"
) -> Union[Population, Sample]:
    """Read a survey or census CSV file

    Args:
        path: CSV file with a header row, comma-delimited
        schema: Column mapping
        kind: "sample", "population" or "auto" (sample when the schema names an outcome)

    Returns:
        Validated Sample or Population, row order preserved
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, comment="#")
    except pd.errors.EmptyDataError as e:
        raise InputError(f"empty file: {path}") from e
    if frame.shape[0] == 0:
        raise InputError(f"no data rows in {path}")

    required = [schema.domain, *schema.covariates]
    if schema.outcome:
        required.append(schema.outcome)
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path.name}: missing column(s) {', '.join(missing)}")

    domain_values = _parse_numeric(frame, schema.domain)
    bad = np.flatnonzero(domain_values != np.floor(domain_values))
    if bad.size:
        row = int(bad[0]) + 1
        raise ParseError(f"row {row}: domain label is not an integer", row=row, column=schema.domain)

    if schema.covariates:
        X = np.column_stack([_parse_numeric(frame, c) for c in schema.covariates])
    else:
        X = np.zeros((frame.shape[0], 0))
    y = _parse_counts(frame, schema.outcome) if schema.outcome else None

    if kind == "auto":
        kind = "sample" if y is not None else "population"
    logger.debug(
        "loaded csv", extra={"event": "load_csv", "path": str(path), "rows": int(frame.shape[0])}
    )
    if kind == "sample":
        return Sample(domains=domain_values.astype(np.int64), X=X, y=y, covariates=schema.covariates)
    if kind == "population":
        return Population(domains=domain_values.astype(np.int64), X=X, y=y, covariates=schema.covariates)
    raise ValidationError(f"unknown container kind: {kind}")


def write_csv(data: _UnitTable, path: Union[str, Path], schema: Optional[CsvSchema] = None) -> Path:
    """Write a container back to CSV with round-trip float precision

    Args:
        data: Sample or Population
        path: Output file
        schema: Column names (defaults to domain, covariate names, y)

    Returns:
        The written path
    """
    schema = schema or CsvSchema(
        domain="domain", covariates=data.covariates, outcome="y" if data.has_outcome else None
    )
    frame = pd.DataFrame({schema.domain: data.domains})
    for j, name in enumerate(schema.covariates):
        frame[name] = data.X[:, j]
    if schema.outcome and data.has_outcome:
        frame[schema.outcome] = data.y
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path
