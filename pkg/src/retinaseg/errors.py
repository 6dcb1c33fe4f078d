"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters: DataError for malformed inputs (bad mask colors, shape or id
mismatches), ConfigError for rejected configurations (invalid grid
geometry, bad hyperparameters), NumericError for non-finite values where
finite math was required.
"""


class RetinaSegError(Exception):
    """Base class for all package errors."""


class DataError(RetinaSegError):
    """Input data violates a contract (bad colors, shapes, class ids)."""


class ConfigError(RetinaSegError):
    """Configuration rejected before any work starts."""


class NumericError(RetinaSegError):
    """A computation produced non-finite values."""
