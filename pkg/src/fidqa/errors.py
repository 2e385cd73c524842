class DataError(ValueError):
    """Malformed or inconsistent input data (CLI exit code 2)."""


class NumericError(ArithmeticError):
    """Non-finite loss or gradient (CLI exit code 3)."""
