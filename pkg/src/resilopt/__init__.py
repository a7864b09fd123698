"""Resilience and effort analysis for discrete-time systems under
finite-horizon temporal specifications.

The package quantifies how much additive disturbance a system can absorb
while meeting a state specification (resilience), how much input authority
is needed to absorb a given disturbance level (effort), and the trade-off
between the two.  Linear time-varying instances are solved exactly through
linear programming; nonlinear instances and richer controller templates are
handled by a sampling-based scenario pipeline with a posteriori risk bounds.
"""

from resilopt.errors import (
    DimensionMismatchError,
    EnumerationGuardError,
    InfeasibleAtMuError,
    NoFeasiblePointError,
    ResiloptError,
    RolloutDivergedError,
    SpecSyntaxError,
    UnboundedObjectiveError,
    UnsupportedStructureError,
)

__version__ = "0.1.0"

__all__ = [
    "DimensionMismatchError",
    "EnumerationGuardError",
    "InfeasibleAtMuError",
    "NoFeasiblePointError",
    "ResiloptError",
    "RolloutDivergedError",
    "SpecSyntaxError",
    "UnboundedObjectiveError",
    "UnsupportedStructureError",
    "__version__",
]
