"""Exception hierarchy shared by every niceflow module."""


class NiceError(Exception):
    """Base class for all errors raised by niceflow."""


class DimensionError(NiceError, ValueError):
    """Shapes of operands do not line up."""


class NumericOverflowError(NiceError, ArithmeticError):
    """A computation produced NaN or Inf.

    ``where`` names the stage that failed (e.g. ``"coupling 2"``) and ``index``
    carries a layer or batch index when one is meaningful.
    """

    def __init__(self, message, where=None, index=None):
        super().__init__(message)
        self.where = where
        self.index = index


class SingularityError(NiceError, ArithmeticError):
    """An invertible map was asked to divide by (nearly) zero."""


class DomainError(NiceError, ValueError):
    """Input values fall outside the admissible domain."""


class FormatError(NiceError, ValueError):
    """A file does not follow the expected binary or text layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(FormatError):
    """A checkpoint was written by an incompatible format version."""


class ConfigError(NiceError, ValueError):
    """Configuration keys or values are invalid."""
