"""Exception types raised across the package."""


class DagnError(Exception):
    """Base class for all package errors."""


class ValidationError(DagnError):
    """Bad user input detected before any computation starts."""


class DecodeError(DagnError):
    pass


class InvalidQualityFactor(ValidationError):
    pass


class PatchTooLarge(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class EmptyBatch(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class ShapeNotDivisible(ValidationError):
    pass


class ImageTooSmall(ValidationError):
    pass


class ChannelMismatch(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class UnknownVariant(ValidationError):
    pass


class ManifestMismatch(DagnError):
    """Checkpoint manifest does not match the file contents or the running code."""


class IncompatibleCheckpoint(ManifestMismatch):
    pass


class NonFiniteLoss(DagnError):
    pass
