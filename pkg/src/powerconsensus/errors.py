"""Exception hierarchy.

Everything numerical derives from :class:`NumericalError` so the CLI can map
it to exit code 1; configuration problems map to exit code 2.
"""


class PowerConsensusError(Exception):
    pass


class NetworkError(PowerConsensusError, ValueError):
    """Invalid network topology or parameters."""


class ConfigError(PowerConsensusError, ValueError):
    """Scenario file does not validate. ``pointer`` is a JSON pointer to the offending key."""

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


class NumericalError(PowerConsensusError, ArithmeticError):
    pass


class VoltageCollapseError(NumericalError):
    def __init__(self, message, t=None, bus=None):
        super().__init__(message)
        self.t = t
        self.bus = bus


class AlgebraicSolveError(NumericalError):
    """Load-flow Newton iteration failed; ``residual`` holds the last residual norm."""

    def __init__(self, message, residual=float("nan"), t=None):
        super().__init__(message)
        self.residual = residual
        self.t = t


class StiffnessError(NumericalError):
    """Adaptive step size fell below the representable minimum."""


class EquilibriumError(NumericalError):
    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)
