"""Exception types shared across the package."""


class VLError(Exception):
    """Base class for package errors."""


class ValidationError(VLError, ValueError):
    """Bad argument, template, config value, or precondition."""


class ShapeError(ValidationError):
    """Tensor or image dimensions do not line up."""


class UnknownTokenError(ValidationError, KeyError):
    """A word outside the closed synthetic lexicon."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class NumericError(VLError, FloatingPointError):
    """A non-finite loss or gradient aborted training."""


class CheckpointError(VLError):
    """Base class for checkpoint decoding failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class PayloadMismatchError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError, KeyError):
    pass
