"""Exception types shared across the toolkit."""


class TractkitError(Exception):
    """Base class for toolkit errors."""


class FormatError(TractkitError, ValueError):
    """A file does not conform to the format it claims to be."""


class BadMagicError(FormatError):
    pass


class UnsupportedDatatypeError(FormatError):
    pass


class TruncatedDataError(FormatError):
    pass


class MissingHeaderKeyError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class WeightsError(TractkitError, ValueError):
    """Weights container content does not match the declared architecture."""


class MissingTensorError(WeightsError):
    pass


class UnknownTensorError(WeightsError):
    pass


class ShapeMismatchError(WeightsError):
    pass


class NumericError(TractkitError, ArithmeticError):
    """Non-finite values appeared during a numeric procedure."""


class DegenerateConfigError(TractkitError, RuntimeError):
    """A run configuration cannot make progress (e.g. no streamline accepted)."""
