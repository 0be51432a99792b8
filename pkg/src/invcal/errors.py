"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, numeric failures exit 3.
"""


class InvcalError(Exception):
    """Base class for all toolkit errors."""


class UsageError(InvcalError):
    """Bad command line or API usage (exit code 1)."""


class DataError(InvcalError):
    """Malformed input files, schemas, or configuration values (exit code 2)."""


class NumericError(InvcalError):
    """Numerical failure during computation (exit code 3)."""


class NotPositiveDefiniteError(NumericError):
    """Cholesky factorization failed even at the maximum jitter."""


class TrainingDivergedError(NumericError):
    """Training produced a non-finite loss."""


class UnfittedModelError(DataError):
    """A prediction was requested from a model whose quantile heads are missing."""
