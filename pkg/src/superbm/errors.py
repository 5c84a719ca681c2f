"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigurationError(ValueError):
    """Inconsistent or invalid configuration (grid, measure placement, parameters)."""

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems or [message])


class PreconditionError(ValueError):
    """A caller-side precondition (e.g. measure domination) does not hold."""


class ConvergenceError(RuntimeError):
    """Picard iteration did not reach tolerance within ``max_iters``.

    The partially converged solution and the per-iteration sup-norm
    differences are attached for diagnostics.
    """

    def __init__(self, message, sup_diffs, solution=None):
        super().__init__(message)
        self.sup_diffs = list(sup_diffs)
        self.solution = solution
