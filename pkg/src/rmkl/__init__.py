"""Karhunen-Loeve expansions of regular random measures on grids."""
from .estimator import RandomMeasureKL
from .exceptions import (
    FactorizationError,
    GridMismatchError,
    NotPSDError,
    NumericalError,
    OriginNodeWarning,
    RMKLError,
    TraceBoundError,
    TruncationWarning,
)
from .expansion import *  # noqa: F401,F403
from .expansion import __all__ as _expansion_all
from .measure_core import *  # noqa: F401,F403
from .measure_core import __all__ as _core_all
from .regularizer import *  # noqa: F401,F403
from .regularizer import __all__ as _reg_all
from .simulate import *  # noqa: F401,F403
from .simulate import __all__ as _sim_all
from .spectral import *  # noqa: F401,F403
from .spectral import __all__ as _spec_all

__version__ = "0.1.0"

__all__ = [
    "RandomMeasureKL",
    "RMKLError",
    "GridMismatchError",
    "NumericalError",
    "NotPSDError",
    "FactorizationError",
    "TraceBoundError",
    "TruncationWarning",
    "OriginNodeWarning",
    *_core_all,
    *_reg_all,
    *_spec_all,
    *_expansion_all,
    *_sim_all,
]
