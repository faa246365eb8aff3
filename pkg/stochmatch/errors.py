"""
Exception hierarchy for the matching library.
"""

from typing import Optional


class StochMatchError(Exception):
    """Base class for all errors raised by stochmatch."""


class ConfigurationError(StochMatchError, ValueError):
    """A parameter or configuration value is outside its valid range."""


class IntegrationError(StochMatchError, RuntimeError):
    """An integrator produced a non-finite state."""


class DegenerateJacobianError(StochMatchError, RuntimeError):
    """A transported Jacobian is (numerically) singular."""


class WeightUnderflowError(StochMatchError, RuntimeError):
    """All importance weights underflowed to zero."""


class DataFormatError(StochMatchError, ValueError):
    """
    An input file could not be parsed.

    The message always names the file and, when known, the line.
    """

    def __init__(self, path: str, message: str, line: Optional[int] = None):
        self.path = str(path)
        self.line = line
        location = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{location}: {message}")
