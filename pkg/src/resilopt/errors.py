"""Exception types shared across the package."""


class ResiloptError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatchError(ResiloptError):
    """A matrix, vector or sequence has a shape inconsistent with the model."""


class RolloutDivergedError(ResiloptError):
    """A trajectory produced a non-finite state."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"state became non-finite at step {step}")


class SpecSyntaxError(ResiloptError):
    """The specification text could not be parsed."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (at position {position})")


class UnsupportedStructureError(ResiloptError):
    """The requested operation needs structure the instance does not have
    (e.g. an exact query on a nonlinear system or a non-polytopic spec)."""


class EnumerationGuardError(ResiloptError):
    """Vertex certification was requested beyond the enumeration budget."""


class InfeasibleAtMuError(ResiloptError):
    """An effort query was posed at a disturbance level above the system's
    resilience; no input bound can recover feasibility."""

    def __init__(self, mu: float):
        self.mu = mu
        super().__init__(
            f"no controller satisfies the spec for all disturbances of size {mu}; "
            "the level exceeds the resilience of the instance"
        )


class NoFeasiblePointError(ResiloptError):
    """The scenario program admitted no feasible decision at any penalty level."""


class UnboundedObjectiveError(ResiloptError):
    """The optimization objective can be driven to infinity."""


class DegeneratePivotError(ResiloptError):
    """The simplex method stalled beyond its anti-cycling budget."""
