"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class HyqutError(Exception):
    exit_code = 1


class ConfigError(HyqutError, ValueError):
    """Bad configuration value or inconsistent hyperparameters."""

    exit_code = 2


class UsageError(HyqutError, ValueError):
    """An operation was called with arguments that violate its contract."""

    exit_code = 2


class NumericalError(HyqutError, ArithmeticError):
    exit_code = 3


class DataError(HyqutError, OSError):
    """Unreadable or malformed input file (corpus, checkpoint, config)."""

    exit_code = 4


class CheckpointError(DataError):
    pass
