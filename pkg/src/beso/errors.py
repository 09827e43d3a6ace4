"""Exception types shared across the package."""


class BesoError(Exception):
    """Base class for all package errors."""


class HypothesisViolation(BesoError):
    """A structural model assumption fails (for instance lambda <= nu)."""


class PathUnusable(BesoError):
    """A sampled noise path exceeds the exponential overflow cap."""


class ConvergenceFailure(BesoError):
    """An iterative inner or outer solver exhausted its budget."""


class ConstraintInfeasible(BesoError):
    """A (state, control) pair violates the affine coupling constraint."""


class ConfigError(BesoError):
    """Run configuration is malformed or fails validation."""
