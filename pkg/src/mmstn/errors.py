class InputError(ValueError):
    """Input rejected: wrong shape, out-of-range value or malformed file."""


class SolverError(RuntimeError):
    """A linear solve failed or did not reach the residual tolerance."""


class NumericalError(ArithmeticError):
    """Non-finite loss or gradient during optimisation."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
