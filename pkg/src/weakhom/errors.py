"""Exception types shared across the package."""


class WeakHomError(Exception):
    """Base class for all package errors."""


class UnsupportedDimensionError(WeakHomError, ValueError):
    def __init__(self, dim):
        super().__init__(f"unsupported dimension: {dim} (only 1 and 2 are implemented)")
        self.dim = dim


class GridMismatchError(WeakHomError, ValueError):
    """Data defined on one grid was handed to an operation on another."""


class EllipticityError(WeakHomError, ValueError):
    """A coefficient matrix field is not uniformly elliptic."""


class AlignmentError(WeakHomError, ValueError):
    """Mesh is not aligned with the epsilon-lattice (or epsilon is not 1/N)."""


class SolverError(WeakHomError, RuntimeError):
    """Iterative solve did not reach its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ConfigError(WeakHomError, ValueError):
    """Invalid study or coefficient configuration."""


class RankDeficientError(WeakHomError, ValueError):
    """The design matrix of a rate fit does not have full column rank."""
