"""Exception hierarchy.

The CLI maps :class:`ConvergenceError` to exit status 2 and every other
:class:`HedonicRegimesError` to exit status 1.
"""


class HedonicRegimesError(Exception):
    """Base class for all package errors."""


class SchemaError(HedonicRegimesError):
    """An input file lacks a required column or is not parseable at all."""


class DataError(HedonicRegimesError):
    """Input values violate a data contract (negative deaths, bad counts)."""


class ConfigError(HedonicRegimesError):
    """Inconsistent configuration (missing population, bad calendar scope)."""


class CoverageError(HedonicRegimesError):
    """A date falls outside a calendar's model coverage window."""


class SpecError(HedonicRegimesError):
    """A model specification term cannot be resolved."""


class RankDeficiencyError(SpecError):
    """Design matrix is rank deficient; ``columns`` names the collinear ones."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class ConvergenceError(HedonicRegimesError):
    """Optimizer hit its iteration cap; ``trace`` holds per-iteration records."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])
