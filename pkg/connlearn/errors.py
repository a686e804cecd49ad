"""
Exception hierarchy for connlearn.

Library code raises these; the CLI translates them into exit codes.
"""


class ConnLearnError(Exception):
    """Base class for every error raised on purpose by connlearn."""


class ConfigurationError(ConnLearnError, ValueError):
    """Hyperparameters or generator arguments that cannot work together."""


class SchemaError(ConnLearnError):
    """Input files that parse but break the documented structure."""


class ParseError(ConnLearnError):
    """A cell or field that cannot be read as the expected type."""


class ContractViolation(ConnLearnError):
    """A shape or invariant broken by the caller or detected by a debug check."""


class UndefinedMetricError(ConnLearnError):
    """A metric requested on data where it has no value (e.g. AUC on one class)."""


class GradientError(ConnLearnError):
    """Non-finite or mismatching gradients."""

    def __init__(self, message: str, parameter: str = ""):
        super().__init__(message)
        self.parameter = parameter


class UsageError(ConnLearnError):
    """A command invoked with arguments it refuses (bad stage, unsupported option)."""


class LookupFailure(ConnLearnError, KeyError):
    """A subject, view or parameter name that does not exist."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""
