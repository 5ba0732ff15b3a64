"""Exception hierarchy shared by every module."""


class VALdsError(Exception):
    """Base class for package errors."""


class ValidationError(VALdsError, ValueError):
    """Input values violate a domain invariant."""


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(VALdsError, ValueError):
    """Bad configuration or parameter out of range."""


class EmptySequenceError(ValidationError):
    pass


class TrainingDivergedError(VALdsError, RuntimeError):
    pass
