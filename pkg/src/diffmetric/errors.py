"""Exception hierarchy shared by the library and the CLI."""


class DiffmetricError(Exception):
    """Base class for all package errors."""


class ConfigError(DiffmetricError, ValueError):
    """Invalid configuration, dataset file or generator spec (CLI exit code 1)."""


class NumericalError(DiffmetricError, ArithmeticError):
    """Runtime numeric failure: non-finite values, violated metric bound, ... (exit code 2)."""
