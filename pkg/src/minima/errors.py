"""Exception types shared across the package."""


class MinimaError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MinimaError):
    """Incompatible tensor shapes or mode sizes."""


class NumericsError(MinimaError):
    """Non-finite values where finite floats are required."""


class RankError(MinimaError):
    """Requested decomposition ranks are out of the feasible range."""


class DegenerateReferenceError(MinimaError):
    """Relative error against a zero-norm reference is undefined."""


class InfeasibleBudgetError(MinimaError):
    """A parameter budget below the smallest admissible configuration.

    Carries ``best_achievable`` (a parameter count or ratio, depending on
    context) so callers can report how close the budget came.
    """

    def __init__(self, message, best_achievable=None):
        super().__init__(message)
        self.best_achievable = best_achievable


class EmptyModelError(MinimaError):
    """Model container holds no matrices."""


class PlanMismatchError(MinimaError):
    """Compression plan does not cover exactly the model's patches."""


class DraftSupportError(MinimaError):
    """Draft model proposed a token it assigns zero probability."""


class OracleTooLargeError(MinimaError):
    """Exact enumeration limits (vocabulary or horizon) exceeded."""


class FormatError(MinimaError):
    """Container file has a bad magic number, version, or index."""


class TruncationError(MinimaError):
    """Container payload is shorter than its index declares."""


class DuplicateEntryError(MinimaError):
    """Container index declares the same entry name twice."""


class ConfigError(MinimaError):
    """Run configuration has unknown keys or out-of-range values."""


class UsageError(MinimaError):
    """Command invoked with missing or inconsistent inputs."""
