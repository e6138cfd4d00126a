"""Shared exception types.

Every module raises one of these rather than bare ValueError so callers can
distinguish bad configuration from corrupt data from estimators that cannot
produce a number on the data they were given.
"""


class DtrBenchError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(DtrBenchError):
    """A configuration value or function argument is out of its legal range."""


class DataIntegrityError(DtrBenchError):
    """Panel data violates a structural invariant (missingness, monotonicity, schema)."""


class EstimationError(DtrBenchError):
    """An estimator cannot be computed on the given data (e.g. empty follower set)."""
