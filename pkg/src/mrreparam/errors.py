"""Exception hierarchy shared across the package."""


class ReparamError(Exception):
    """Base class for all package errors."""


class ShapeError(ReparamError, ValueError):
    """An operation received tensors whose dimensions do not fit together."""


class DegenerateVarianceError(ReparamError, ValueError):
    """Normalization was asked to estimate a variance from a single element."""


class ConfigError(ReparamError, ValueError):
    """A model, dataset or training configuration is invalid or inconsistent."""


class ParamRangeError(ReparamError, ValueError):
    """Acquisition parameters fall outside the supported sampling bounds."""


class FormatError(ReparamError):
    """A persisted file has the wrong magic, version or structure."""


class CorruptionError(FormatError):
    """A persisted file is truncated or fails its checksum."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ModelKindMismatchError(ConfigError):
    """A checkpoint or dataset was built for a different model variant."""


class NumericError(ReparamError, ArithmeticError):
    """Training produced a non-finite loss."""
