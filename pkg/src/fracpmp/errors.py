"""Exception hierarchy shared across the package."""


class FracPMPError(Exception):
    """Base class for all package errors."""


class InvalidArgument(FracPMPError, ValueError):
    """An argument is outside its documented domain."""


class PreconditionViolation(FracPMPError):
    """Estimated regularity does not meet an operation's requirements.

    Attributes
    ----------
    details : dict
        Estimated quantities (for example Hölder exponents) that failed.
    """

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class DivergenceError(FracPMPError, FloatingPointError):
    """A solver produced non-finite values."""

    def __init__(self, message, step=None, path=None):
        super().__init__(message)
        self.step = step
        self.path = path


class UnsupportedError(FracPMPError):
    """Operation is undefined for the requested parameters (e.g. H = 1/2)."""


class IllConditioned(FracPMPError):
    """A consistency diagnostic exceeded its hard limit."""


class StallError(FracPMPError):
    """The optimizer could not find a descent step."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ConfigError(FracPMPError):
    """Configuration could not be parsed or validated."""

    def __init__(self, message, line=None, column=None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + loc)
        self.line = line
        self.column = column
