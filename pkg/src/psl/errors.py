"""Exception hierarchy shared by every psl module."""


class PslError(Exception):
    """Base class for all errors raised by psl."""


class DimensionError(PslError):
    """Shape or extent mismatch between tensors/arrays."""


class ContractError(PslError):
    """A documented precondition or postcondition was violated."""


class ConfigError(PslError):
    """Invalid configuration value or combination."""


class DomainError(PslError):
    """Math domain violation detected in debug mode (e.g. log of <= 0)."""


class ParseError(PslError):
    """Malformed input file; carries a byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
