"""Exception hierarchy shared by the solvers and the command-line harness."""


class MfgError(Exception):
    """Base class for every error raised by :mod:`mfglab`."""


class ContractViolation(MfgError, ValueError):
    """An argument does not satisfy an operation's precondition."""


class ConfigError(MfgError):
    """The experiment configuration is incomplete or invalid."""


class NumericalAbort(MfgError):
    """A coefficient or regression produced non-finite numbers."""


class SingularRegression(NumericalAbort):
    """The regression design lost rank beyond what the ridge term repairs."""

    def __init__(self, step, message="singular regression design"):
        super().__init__(f"{message} at time step {step}")
        self.step = step


class NonConvergence(MfgError):
    """A fixed-point iteration exhausted its iteration budget.

    The partially filled report (if any) is attached as ``report`` so callers
    can inspect the distance history.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


MaxIterExceeded = NonConvergence


class BudgetExceeded(MfgError):
    """The requested particle budget exceeds the configured cap."""
