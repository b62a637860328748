"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class CfamError(Exception):
    exit_code = 1


class ConfigError(CfamError, ValueError):
    """Invalid configuration or argument (exit code 2)."""

    exit_code = 2


class DataError(CfamError, ValueError):
    """Malformed or inconsistent input data (exit code 3)."""

    exit_code = 3


class NumericalError(CfamError, ArithmeticError):
    """Non-finite values produced by the solver (exit code 4)."""

    exit_code = 4


class NoOverlapError(DataError):
    """No test subject received the arm recommended by the rule."""
