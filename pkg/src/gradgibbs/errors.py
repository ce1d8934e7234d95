"""Exception types shared across the package."""


class PreconditionError(ValueError):
    """An input violates the documented precondition of an operation."""


class InconsistencyError(ValueError):
    """A gradient field violates the loop (plaquette) or winding constraints."""


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap.

    The best residual seen so far is kept on ``best_residual``.
    """

    def __init__(self, message, best_residual=float("nan"), iterations=0):
        super().__init__(message)
        self.best_residual = best_residual
        self.iterations = iterations


class NumericalError(RuntimeError):
    """Integrator instability, failed factorization, or quadrature failure."""


class ResolutionError(ValueError):
    """The lattice is too small for the requested scale (wrap-around, support overflow)."""
