"""Exception types shared across the package.

Domain errors on scalar inputs raise plain ``ValueError``; the classes here
mark failures that callers may want to handle differently (retry with other
parameters, report feasibility limits, reject a config up front).
"""


class SolverError(RuntimeError):
    """A numerical solve (root bracketing, calibration) failed."""


class InfeasibleError(RuntimeError):
    """The requested operating point cannot be met with the given constraints.

    Typical causes: peak training power too small for the target boundary,
    or a training budget that already exceeds the total power budget.
    """


class ConfigError(ValueError):
    """A scenario configuration is malformed or fails validation."""
