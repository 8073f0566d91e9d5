"""Exception types shared across the package."""


class MorelError(Exception):
    """Base class for all package errors."""


class InvalidInput(MorelError, ValueError):
    pass


class PreconditionViolation(MorelError):
    pass


class OutOfWindow(MorelError, ValueError):
    """A frame index fell outside the temporal window it was queried against."""


class NonFiniteGradient(MorelError, FloatingPointError):
    pass


class FrozenLeak(MorelError):
    """A parameter that should be frozen received a nonzero gradient."""


class NotFound(MorelError, FileNotFoundError):
    pass


class CorruptRecord(MorelError):
    pass


class LedgerViolation(MorelError):
    pass


class ConfigError(MorelError, ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
