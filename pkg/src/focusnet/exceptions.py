"""Exception hierarchy shared by every focusnet module."""


class FocusNetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FocusNetError, ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class GeometryError(FocusNetError, ValueError):
    """Spatial geometry is invalid (zero-size output, odd size before a stride-2 step)."""


class ParameterError(FocusNetError, ValueError):
    """A scalar argument is outside its allowed range."""


class ConfigError(FocusNetError, ValueError):
    """An architecture, training or run configuration violates an invariant."""


class DegenerateStatisticsError(FocusNetError, ValueError):
    """Batch statistics cannot be computed from a single element per channel."""


class ContractError(FocusNetError, RuntimeError):
    """An API precondition was violated by the caller."""


class ValidationError(FocusNetError, ValueError):
    """Input data failed a content check (e.g. a mask that is not binary)."""


class DataError(FocusNetError):
    """A dataset on disk is malformed or unreadable."""


class PairingError(DataError):
    """An image has no matching mask (or the reverse)."""

    def __init__(self, stem, message=None):
        super().__init__(message or f"no mask found for image '{stem}'")
        self.stem = stem


class CheckpointError(FocusNetError):
    """A checkpoint file could not be decoded."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    def __init__(self, message, tensor_name=None):
        super().__init__(message)
        self.tensor_name = tensor_name


class NumericalError(FocusNetError, FloatingPointError):
    """Training produced a non-finite loss."""
