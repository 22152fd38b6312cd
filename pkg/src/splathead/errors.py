"""Exception types shared across the package.

Exit-code mapping for the CLI: ValidationError -> 2, NumericalError -> 3.
"""


class SplatHeadError(Exception):
    """Base class for package errors."""


class ValidationError(SplatHeadError):
    """Bad input: shape mismatch, malformed file, out-of-range value."""


class NumericalError(SplatHeadError):
    """Numerical failure: NaN/Inf encountered, failed gradient check."""
