"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: validation errors exit 1,
numerical failures exit 2, I/O errors exit 3.
"""


class ValidationError(ValueError):
    """Invalid input: bad shapes, malformed files, or out-of-range settings."""


class DimensionMismatch(ValidationError):
    """Two inputs that must share a dimension do not."""


class NumericalError(RuntimeError):
    """A numerical routine failed (non-finite values, factorization failure)."""


class NotPositiveDefinite(NumericalError):
    """Cholesky factorization failed even after the jitter ladder."""

    def __init__(self, message, final_jitter=None):
        super().__init__(message)
        self.final_jitter = final_jitter
