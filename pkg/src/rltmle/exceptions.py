"""Exception and warning types shared across the package."""


class ConfigurationError(ValueError):
    """Inputs are inconsistent with each other (shapes, names, sizes)."""


class AbsoluteContinuityError(ValueError):
    """An observed action has zero probability under the behavior policy."""


class InvariantViolation(ValueError):
    """A value lies outside the range an operation requires."""


class SolverError(RuntimeError):
    """An iterative solver stopped before reaching its tolerance.

    The best iterate found so far is attached as ``best``.
    """

    def __init__(self, message, best=None, diagnostics=None):
        super().__init__(message)
        self.best = best
        self.diagnostics = diagnostics or {}


class DegenerateWeightsWarning(RuntimeWarning):
    """All importance ratios vanished at some time step."""
