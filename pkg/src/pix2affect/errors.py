"""Exception types shared across the package."""


class PixelAffectError(Exception):
    """Base class for all errors raised by pix2affect."""


class ShapeError(PixelAffectError, ValueError):
    """Invalid or inconsistent array shape, window, or kernel extent."""


class ConfigError(PixelAffectError, ValueError):
    """Invalid configuration value, unknown model name, or bad layer index."""


class DataError(PixelAffectError, ValueError):
    """Bad input data: degenerate traces, pairing mismatches, too few records."""


class ParseError(DataError):
    """Malformed text input. ``line`` is the 1-based offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(PixelAffectError, ArithmeticError):
    """Non-finite value encountered. ``coordinate`` locates the offending entry."""

    def __init__(self, message: str, coordinate: int | None = None):
        super().__init__(message)
        self.coordinate = coordinate


class TrainingError(PixelAffectError, RuntimeError):
    """Training diverged. ``epoch`` is the 1-based epoch where it happened."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
