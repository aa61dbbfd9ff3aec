"""Exception hierarchy.

Everything raised on purpose by the library derives from :class:`RMKLError`
so the command line can map failures onto exit codes.
"""


class RMKLError(Exception):
    """Base class for library errors."""


class GridMismatchError(RMKLError, ValueError):
    """Two objects live on different grids."""


class NumericalError(RMKLError, ArithmeticError):
    """A numerical precondition failed (PSD, factorization, bounds)."""


class NotPSDError(NumericalError):
    pass


class FactorizationError(NumericalError):
    pass


class TraceBoundError(NumericalError):
    pass


class TruncationWarning(UserWarning):
    """Mass sits on the outermost cells of the truncated box."""


class OriginNodeWarning(UserWarning):
    """A grid node lies exactly on a coordinate hyperplane through the origin."""
