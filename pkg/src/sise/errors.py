"""Exception hierarchy shared across the package.

``ConfigError`` covers bad user input (CLI arguments, config files,
inconsistent matrix shapes).  ``NumericsError`` covers failures detected
while computing (divergence, rank loss, missing stabilizing solutions).
The CLI maps the two families to distinct exit codes.
"""


class SiseError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SiseError):
    """Invalid configuration, arguments or input data."""


class InvalidInput(ConfigError):
    """A matrix or signal does not satisfy a documented precondition."""


class InvalidNoise(ConfigError):
    """A noise intensity matrix is not symmetric positive definite."""


class UnknownScenario(ConfigError):
    """Requested scenario name is not registered."""


class NumericsError(SiseError):
    """A numerical procedure failed at run time."""


class DivergedIntegration(NumericsError):
    """Integration produced a non-finite state."""

    def __init__(self, time, message=None):
        self.time = time
        super().__init__(message or f"integration diverged at t={time:.6g}")


class DivergedSimulation(DivergedIntegration):
    """Plant simulation produced a non-finite state."""


class RankDeficiency(NumericsError):
    """A matrix lost rank where full rank is required."""

    def __init__(self, time=None, message=None):
        self.time = time
        if message is None:
            message = "rank deficiency"
            if time is not None:
                message += f" at t={time:.6g}"
        super().__init__(message)


class NoStabilizingSolution(NumericsError):
    """The algebraic Riccati equation has no stabilizing solution."""


class UnidentifiableInput(NumericsError):
    """The unknown-input direction cannot be recovered from the data."""


class IllConditionedInnovation(NumericsError):
    """An innovation covariance is not safely positive definite."""


class NeedWarmup(NumericsError):
    """The lagged-measurement buffer does not yet span the requested lag."""


class FeedbackLoopIllPosed(NumericsError):
    """The implicit estimate/control loop cannot be resolved."""


class Unresolvable(NumericsError):
    """Requested quantity cannot be recovered from the available gains."""


class NoFiniteBound(NumericsError):
    """A requested analytic bound does not exist (e.g. unstable dynamics)."""
