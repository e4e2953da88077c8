"""Exception hierarchy shared by all modules.

The CLI maps :class:`ConfigError` to exit code 2 and every
:class:`NumericError` to exit code 3.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent input parameters."""


class NumericError(RuntimeError):
    """A numerical routine failed or produced an unphysical result."""


class ConvergenceError(NumericError):
    """Iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class InstabilityError(NumericError):
    """The configuration is not a stable local minimum."""
