"""Exception types shared across the package."""


class DataError(Exception):
    """Missing, malformed, or inconsistent input data."""


class NumericError(Exception):
    """Non-finite values or unrecoverable numerical failure."""
