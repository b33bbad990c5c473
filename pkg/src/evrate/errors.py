"""Semantic exception and warning types shared across the package."""


class EvrateError(Exception):
    """Base class for all package errors."""


class DomainError(EvrateError, ValueError):
    """An input violates a documented precondition (range, sign, shape)."""


class InfeasibleError(EvrateError):
    """No admissible rate satisfies the overload budget for some state."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class TruncationError(EvrateError):
    """A truncated state space cannot hold the required probability mass."""

    def __init__(self, message, required_n_max=None):
        super().__init__(message)
        self.required_n_max = required_n_max


class ConvergenceError(EvrateError):
    """An iterative solver exhausted its budget before reaching tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class PolicyShapeError(EvrateError):
    """A rate table violates a required shape property (monotone/convex)."""


class TableFormatError(EvrateError, ValueError):
    """A rate-table or distribution file does not parse.

    ``line`` is the 1-based line number of the offending row when known.
    """

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class OutOfModelWarning(UserWarning):
    """A computation was requested outside the regime the guarantees cover."""


class TruncationWarning(UserWarning):
    """Noticeable probability mass sits at a truncation boundary."""
