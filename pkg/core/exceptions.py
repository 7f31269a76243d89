"""
Error hierarchy for the simulator and attack toolkit.

Every error carries the process exit code the `nstep` command reports for it.
"""


class NStepError(Exception):
    """Base class for all simulator, attack and runner failures."""

    exit_code = 1

    def __init__(self, message, **context):
        super().__init__(message)
        self.message = message
        self.context = context

    def __str__(self):
        if not self.context:
            return self.message
        details = ", ".join(f"{key}={value}" for key, value in sorted(self.context.items()))
        return f"{self.message} ({details})"


class ConfigurationError(NStepError):
    exit_code = 2


class ProfileError(ConfigurationError):
    """Profile failed schema validation or could not be located."""


class MalformedVictimError(ConfigurationError):
    """Victim program cannot reach a boundary page or references undeclared variables."""


class UsageError(ConfigurationError):
    pass


class TrainingError(ConfigurationError):
    pass


class CalibrationError(NStepError):
    exit_code = 3


class BudgetExhaustedError(NStepError):
    exit_code = 4


class InconclusiveResultError(NStepError):
    """Every trace collected for one guess was aborted by the interrupt cap."""


class DependentRowsError(NStepError):
    pass


class OffCurveError(NStepError):
    pass


class NonInvertibleError(NStepError):
    pass
