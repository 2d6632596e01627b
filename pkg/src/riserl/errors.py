"""Exception types shared across the package."""


class RiseError(Exception):
    pass


class ConfigError(RiseError, ValueError):
    """Shapes, widths or settings that cannot work together."""


class UsageError(RiseError, RuntimeError):
    """An operation was called in the wrong state or mode."""


class NumericFault(RiseError, FloatingPointError):
    """A non-finite value showed up where only finite values are allowed."""

    def __init__(self, message: str, where: str | None = None):
        super().__init__(message if where is None else f"{where}: {message}")
        self.where = where


class NotReady(RiseError):
    """Replay does not hold enough sampleable data yet."""
