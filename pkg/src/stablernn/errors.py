"""Exception types shared across the package."""


class StableRNNError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(StableRNNError, ValueError):
    """Bad dimensions, unknown keys, malformed config or weight files."""


class NumericError(StableRNNError, ArithmeticError):
    """A non-finite value appeared during a computation.

    ``step`` names the time or optimization step where it was detected,
    when that is known.
    """

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class SvdConvergenceError(NumericError):
    """Jacobi sweeps hit the hard cap without meeting the tolerance."""


class NotContractiveError(StableRNNError, ValueError):
    """Raised when an operation needs lambda < 1 and did not get it."""
