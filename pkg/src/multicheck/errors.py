"""Exception hierarchy shared by all modules.

Each class carries the process exit code the CLI maps it to.
"""


class MultiCheckError(Exception):
    exit_code = 1


class ConfigError(MultiCheckError, ValueError):
    exit_code = 1


class SchemaError(MultiCheckError, ValueError):
    """A dataset record does not match the sample schema."""

    exit_code = 2


class InputError(MultiCheckError, ValueError):
    exit_code = 2


class CompatibilityError(MultiCheckError):
    """Checkpoint and dataset disagree (image shape, fingerprint, labels)."""

    exit_code = 2


class NumericError(MultiCheckError, ArithmeticError):
    """Divergence during training or a failed gradient check."""

    exit_code = 3


class UndefinedTestError(MultiCheckError, ValueError):
    """A significance test has no discordant observations to work with."""

    exit_code = 3
