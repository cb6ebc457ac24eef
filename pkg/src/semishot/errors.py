"""Exception types shared across the package."""


class SemishotError(Exception):
    """Base class for all package errors."""


class FormatError(SemishotError, ValueError):
    """Manifest or blob does not match the declared on-disk format."""


class DataError(SemishotError, ValueError):
    """Numeric content violates a data invariant (NaN, bad norm, bad label)."""


class ConfigError(SemishotError, ValueError):
    """Invalid solver or run configuration."""


class SamplingError(SemishotError, ValueError):
    """Requested split cannot be drawn from the pool."""


class GenerationError(SemishotError, RuntimeError):
    """Synthetic data generation failed (e.g. infeasible center separation)."""


class DegeneratePlanError(SemishotError, ArithmeticError):
    """A transport plan row or column collapsed to zero mass."""


class SolverError(SemishotError, RuntimeError):
    """A solver failed mid-run; carries the failing iteration index."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration
