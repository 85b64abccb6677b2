"""Exception hierarchy shared by every module.

Each class maps to one failure category so that the command line front end
can translate it into a stable exit status.
"""


class TorusSGMError(Exception):
    """Base class for all library errors."""


class InvalidInputError(TorusSGMError, ValueError):
    """An argument violates a documented precondition."""


class NoDensityError(TorusSGMError, ValueError):
    """A density was requested for a measure that has none (e.g. Diracs at s=0)."""


class DegenerateDensityError(TorusSGMError, ArithmeticError):
    """A density vanished where a score was requested."""


class InvalidTerminalError(InvalidInputError):
    """Terminal data for the Hopf-Cole path is not bounded below by one."""


class ConfigurationError(TorusSGMError, ValueError):
    """Numerical configuration is inconsistent (e.g. unstable time step)."""

    def __init__(self, message, suggestion=None):
        super().__init__(message)
        self.suggestion = suggestion


class SolverDivergedError(TorusSGMError, ArithmeticError):
    """A PDE solve produced non-finite values."""


class TrainingDivergedError(TorusSGMError, ArithmeticError):
    """Score training blew up; the partial loss trace is attached."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class SimulationError(TorusSGMError, RuntimeError):
    """Score evaluation failed inside an SDE run."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InsufficientDataError(TorusSGMError, ValueError):
    """Too few usable points for a regression."""
