"""Exception hierarchy shared by every vtflow module.

The CLI maps these onto stable exit codes: config/usage problems exit 1,
file/format problems exit 2, numeric aborts exit 3.
"""


class VtflowError(Exception):
    """Base class for all library errors."""


class DimensionError(VtflowError):
    """Shape mismatch between operands; message names both shapes."""


class ContractError(VtflowError):
    """A documented precondition was violated by the caller."""


class ConfigError(VtflowError):
    """Invalid configuration value or malformed config document."""


class StateError(VtflowError):
    """Operation issued against an object in the wrong state."""


class NumericError(VtflowError):
    """NaN or Inf appeared in a forward or backward pass."""


class VocabularyError(VtflowError):
    """A value has no corresponding vocabulary word."""


class CheckpointError(VtflowError):
    """Checkpoint file is missing a tensor, corrupt, or shape-mismatched."""


class IntegrationError(VtflowError):
    """Non-finite velocity encountered mid-integration.

    Carries the step index at which the failure occurred.
    """

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class FormatError(VtflowError):
    """A data file failed to parse or validate."""
