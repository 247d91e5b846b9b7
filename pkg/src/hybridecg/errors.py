"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class HybridEcgError(Exception):
    exit_code = 1


class ConfigError(HybridEcgError, ValueError):
    exit_code = 2


class DataIOError(HybridEcgError, OSError):
    exit_code = 3


class IntegrityError(HybridEcgError):
    exit_code = 4


class NumericError(HybridEcgError, FloatingPointError):
    exit_code = 5


class FormatError(HybridEcgError, ValueError):
    """Malformed or truncated binary/text input. ``offset`` is a byte offset or line number."""

    exit_code = 6

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at {offset})"
        super().__init__(message)
        self.offset = offset


class DimensionError(HybridEcgError, ValueError):
    exit_code = 2


class UsageError(HybridEcgError, RuntimeError):
    exit_code = 1


class ValidationError(ConfigError):
    pass


class DataError(HybridEcgError, ValueError):
    exit_code = 4


class UndefinedMetric(HybridEcgError, ValueError):
    """Raised when a ranking metric or correlation has no defined value."""


# Documented exit codes for the command line.
EXIT_CODES = {
    "success": 0,
    "other": 1,
    "config": ConfigError.exit_code,
    "io": DataIOError.exit_code,
    "integrity": IntegrityError.exit_code,
    "numeric": NumericError.exit_code,
    "format": FormatError.exit_code,
}
