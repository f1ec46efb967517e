"""Exception taxonomy shared by every module.

CLI exit codes map onto these: validation-style errors exit 1, I/O and
checkpoint corruption exit 2, numeric failures exit 3.
"""


class CoboomError(Exception):
    """Base class for all package errors."""


class DimensionError(CoboomError):
    """Tensor or image shapes do not line up."""


class ConfigurationError(CoboomError):
    """Invalid run configuration or incompatible component settings."""


class ContractError(CoboomError):
    """A documented precondition was violated by the caller."""


class NumericError(CoboomError):
    """NaN/Inf appeared, or a numeric procedure failed its tolerance."""


class DegenerateEmbeddingError(NumericError):
    """An embedding collapsed to (near-)zero norm; cosine terms are undefined."""


class FormatError(CoboomError):
    """A binary/text file does not match its expected format."""


class ParseError(FormatError):
    """A structured text file failed to parse; message carries the line number."""


class CheckpointError(CoboomError):
    """Checkpoint is corrupt, incomplete, or from an unknown format version."""
