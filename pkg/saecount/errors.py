"""
Exception hierarchy
Every error carries the process exit code the CLI reports for it
"""


class SaeError(Exception):
    """Base class for all saecount errors"""

    exit_code = 1


class ValidationError(SaeError, ValueError):
    """Inputs or configuration rejected before computation"""

    exit_code = 2


class SchemaError(ValidationError):
    """A declared column is missing from an input file"""


class ParseError(ValidationError):
    """A value in an input file could not be parsed

    Attributes:
        row: 1-based data row number (header excluded), or None
        column: Offending column name, or None
    """

    def __init__(self, message: str, row: int = None, column: str = None):
        super().__init__(message)
        self.row = row
        self.column = column


class ConfigError(ValidationError):
    """Unknown key, invalid value, or incompatible option combination"""


class DimensionError(ValidationError):
    """Array shapes disagree (covariate count, vector lengths)"""


class RankDeficiencyError(ValidationError):
    """Design matrix is not of full column rank

    Attributes:
        columns: Names of the columns found to be collinear
    """

    def __init__(self, message: str, columns=None):
        super().__init__(message)
        self.columns = list(columns or [])


class InputError(SaeError):
    """Missing, empty, or unreadable input file"""

    exit_code = 4


class ConvergenceError(SaeError):
    """Statistical non-convergence surfaced as a failure"""

    exit_code = 3


class BootstrapError(ConvergenceError):
    """Too many bootstrap replicates failed

    Attributes:
        failures: Number of failed replicates
        attempted: Number of replicates attempted
    """

    def __init__(self, message: str, failures: int = 0, attempted: int = 0):
        super().__init__(message)
        self.failures = failures
        self.attempted = attempted
