"""Exception hierarchy shared by all solver modules."""


class QlbgkError(Exception):
    """Base class for all errors raised by this package."""


class InvalidConfigurationError(QlbgkError):
    """A grid, operator or run configuration violates a precondition."""


class InvalidInputError(QlbgkError):
    """Caller-supplied data (densities, sources) violates a precondition."""


class InvalidStateError(QlbgkError):
    """An operator state is outside its admissible set (e.g. non-Hermitian)."""


class NumericalFailureError(QlbgkError):
    """A numerical kernel failed (overflow, eigendecomposition breakdown)."""


class NonConvergenceError(QlbgkError):
    """An iterative solve exhausted its iteration budget.

    Carries the last residual so callers can report how far the solve got.
    """

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class GridMismatchError(QlbgkError):
    """Two objects that must share a grid do not."""


class StiffnessWarning(UserWarning):
    """The reference integrator substep does not resolve the relaxation scale."""
