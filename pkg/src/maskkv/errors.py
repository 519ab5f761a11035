"""Exception hierarchy shared by every module."""


class MaskKVError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(MaskKVError, ValueError):
    """Invalid configuration or hyperparameters."""


class ProtocolError(MaskKVError, RuntimeError):
    """A call violated the denoising / caching protocol."""


class CacheError(MaskKVError, ValueError):
    """Cache contents do not match the model they are used with."""


class NumericError(MaskKVError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ComparisonError(MaskKVError, ValueError):
    """Two sequences cannot be compared."""


class ParseError(MaskKVError, ValueError):
    """Malformed profile, trace or report input.

    ``offset`` is where parsing failed, in ``unit`` (byte offset for traces,
    line number for profiles and reports).
    """

    def __init__(self, message: str, offset: int | None = None, unit: str = "offset"):
        if offset is not None:
            message = f"{message} (at {unit} {offset})"
        super().__init__(message)
        self.offset = offset
        self.unit = unit
