"""Exception types shared across the package."""


class ForeseeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ForeseeError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(ForeseeError, ValueError):
    """A precondition of an operation was violated."""


class FormatError(ForeseeError, ValueError):
    """A file on disk is malformed, missing or undecodable."""


class ParseError(ForeseeError, ValueError):
    """A config file or flag value could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PathError(ForeseeError, FileNotFoundError):
    """A required path does not exist or cannot be used."""
