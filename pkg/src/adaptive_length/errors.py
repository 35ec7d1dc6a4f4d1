"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (see ``cli.py``).
"""


class AdaptiveLengthError(Exception):
    """Base class for all package errors."""


class ConfigError(AdaptiveLengthError, ValueError):
    """Invalid configuration, hyperparameter range, or operand shape."""


class UsageError(AdaptiveLengthError, ValueError):
    """An operation was called outside its contract (bad index, empty input, ...)."""


class NumericDomainError(AdaptiveLengthError, ArithmeticError):
    """A value left the domain of a function (log of a nonpositive number, NaN loss)."""


class MissingPrerequisiteError(AdaptiveLengthError, FileNotFoundError):
    """A pipeline phase was started before the artifact it depends on exists."""

    def __init__(self, phase, artifact):
        self.phase = phase
        self.artifact = artifact
        super().__init__(f"phase '{phase}' requires missing artifact: {artifact}")
