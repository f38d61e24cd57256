"""Error taxonomy shared across the package; the CLI maps these to exit codes."""


class UsageError(Exception):
    """Bad invocation or configuration (exit code 1)."""


class DataError(Exception):
    """Malformed or missing data files (exit code 2)."""


class NumericError(Exception):
    """Non-finite values during optimization (exit code 3)."""
