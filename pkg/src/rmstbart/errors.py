"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class RmstBartError(Exception):
    exit_code = 1


class InputError(RmstBartError, ValueError):
    """Unreadable or malformed input data."""

    exit_code = 2


class ConfigurationError(RmstBartError, ValueError):
    """Invalid hyperparameters, flags or sampler settings."""

    exit_code = 3


class ParameterDomainError(ConfigurationError):
    """A distribution or transform parameter outside its domain."""


class NumericalError(RmstBartError, ArithmeticError):
    """Estimation failed numerically (zero weights, divergent fits)."""

    exit_code = 4
