"""Exception types raised across the package."""


class ShapeTimeError(Exception):
    """Base class for all package errors."""


class DomainError(ShapeTimeError, ValueError):
    """An elementary op was evaluated outside its domain (log of x <= 0, x / 0)."""


class NonFiniteError(ShapeTimeError, FloatingPointError):
    """A network output or loss contained NaN or inf."""


class DivergenceError(ShapeTimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"loss became non-finite at epoch {epoch}")


class UnidentifiableError(ShapeTimeError):
    """Mean-term Fisher information is below the identifiability floor."""


class AllUnidentifiableError(UnidentifiableError):
    """Every point of a shape failed the identifiability check."""


class InsufficientDataError(ShapeTimeError):
    """Too few samples to form a reliable estimate."""


class EmptyShapeError(ShapeTimeError, ValueError):
    """An aggregation was requested over zero points."""


class DegenerateError(ShapeTimeError, ValueError):
    """A metric is undefined because the reference has zero variance."""


class FormatError(ShapeTimeError):
    """A file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(FormatError):
    """A record parsed but violates the declared schema."""


class VersionError(FormatError):
    """File format version does not match the reader."""

    def __init__(self, found, expected):
        self.found = found
        self.expected = expected
        super().__init__(f"format version {found} is not supported (expected {expected})")


class ExtrapolationWarning(UserWarning):
    """A query time lies outside the range the model was trained on."""
