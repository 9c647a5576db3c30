"""Exception types shared across the package."""


class MgfcError(Exception):
    """Base class for all package errors."""


class ShapeError(MgfcError):
    """Operand dimensions are incompatible."""


class NumericError(MgfcError):
    """Non-finite values where finite ones are required."""


class ContractError(MgfcError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class ParameterError(MgfcError):
    """Invalid algorithm parameter (k > m, duplicate names, ...)."""


class ResourceError(MgfcError):
    """A configured resource cap would be exceeded."""


class DataError(MgfcError):
    """Invalid data content (out-of-range labels, empty confusion matrix)."""


class FormatError(MgfcError):
    """Malformed serialized file."""


class IntegrityError(MgfcError):
    """Checkpoint/frozen-weight integrity violation."""


class ConfigError(MgfcError):
    """Invalid run configuration."""


class GenerationError(MgfcError):
    """Synthetic scene generation failed (e.g. placement exhausted)."""
