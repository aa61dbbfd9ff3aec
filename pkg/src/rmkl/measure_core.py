"""Grids, atomic signed measures and their elementary operations.

A :class:`Grid` truncates R^d (d = 1 or 2) to an axis-aligned box split into
equal cells. Measures are atomic: one weight per cell, located at the cell
midpoint. Node arrays are flattened in row-major (C) order, so for d = 2 the
node ``(i, k)`` has flat index ``i * nodes_per_axis[1] + k``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .exceptions import GridMismatchError, TruncationWarning

__all__ = [
    "Grid",
    "GridMeasure",
    "GridFunction",
    "PairGridMeasure",
    "CovarianceGridMeasure",
    "total_variation",
    "integrate",
    "pair_integrate",
    "cdf",
    "tensor",
    "tv_of_partial_application",
    "psd_check",
    "boundary_mass_fraction",
    "warn_if_boundary_mass",
]

PSD_TOL = 1e-9
BOUNDARY_MASS_FRACTION = 0.01


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Grid:
    """Truncated lattice of cell midpoints on the box ``[lower, upper]``."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    nodes_per_axis: tuple[int, ...]

    def __post_init__(self):
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        counts = tuple(int(v) for v in np.atleast_1d(self.nodes_per_axis))
        if not (len(lower) == len(upper) == len(counts)):
            raise ValueError("lower, upper and nodes_per_axis must have the same length")
        if len(lower) not in (1, 2):
            raise ValueError(f"only d = 1 or d = 2 is supported, got d = {len(lower)}")
        for k, (a, b, n) in enumerate(zip(lower, upper, counts)):
            if not (math.isfinite(a) and math.isfinite(b)) or not a < b:
                raise ValueError(f"axis {k}: need finite lower < upper, got [{a}, {b}]")
            if n < 2:
                raise ValueError(f"axis {k}: need at least 2 nodes, got {n}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "nodes_per_axis", counts)

    @classmethod
    def regular(cls, dim: int = 1, lower: float = -5.0, upper: float = 5.0, nodes: int = 32) -> "Grid":
        """Same interval and node count on every axis (default box [-5, 5]^d)."""
        return cls((lower,) * dim, (upper,) * dim, (nodes,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nodes_per_axis

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.nodes_per_axis))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((b - a) / n for a, b, n in zip(self.lower, self.upper, self.nodes_per_axis))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis_nodes(self, k: int) -> np.ndarray:
        h = self.spacing[k]
        return self.lower[k] + (np.arange(self.nodes_per_axis[k]) + 0.5) * h

    @cached_property
    def nodes(self) -> np.ndarray:
        """``(n_nodes, dim)`` array of node coordinates, row-major."""
        axes = np.meshgrid(*[self.axis_nodes(k) for k in range(self.dim)], indexing="ij")
        return _frozen(np.stack([a.ravel() for a in axes], axis=1))

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        """True on nodes belonging to the outermost layer of cells."""
        mask = np.zeros(self.shape, dtype=bool)
        for k in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[k] = 0
            mask[tuple(idx)] = True
            idx[k] = -1
            mask[tuple(idx)] = True
        mask = mask.ravel()
        mask.setflags(write=False)
        return mask

    def nearest_node(self, point: Sequence[float]) -> int:
        point = np.atleast_1d(np.asarray(point, dtype=float))
        if point.shape != (self.dim,):
            raise ValueError(f"point must have {self.dim} coordinates")
        multi = []
        for k in range(self.dim):
            t = self.axis_nodes(k)
            multi.append(int(np.argmin(np.abs(t - point[k]))))
        return int(np.ravel_multi_index(tuple(multi), self.shape))

    def contains(self, lower: Sequence[float], upper: Sequence[float]) -> bool:
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        return bool(np.all(lo >= np.array(self.lower)) and np.all(hi <= np.array(self.upper)))

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "lower": list(self.lower),
            "upper": list(self.upper),
            "nodes_per_axis": list(self.nodes_per_axis),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Grid":
        grid = cls(tuple(data["lower"]), tuple(data["upper"]), tuple(data["nodes_per_axis"]))
        if "dim" in data and int(data["dim"]) != grid.dim:
            raise ValueError(f"grid dim {data['dim']} does not match the bounds ({grid.dim})")
        return grid


def _check_same_grid(a: Grid, b: Grid) -> None:
    if a != b:
        raise GridMismatchError(f"grid mismatch: {a} vs {b}")


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """Signed atomic measure: ``weights[i]`` is the mass of cell ``i``."""

    grid: Grid
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.shape != (self.grid.n_nodes,):
            raise ValueError(f"expected {self.grid.n_nodes} weights, got {w.size}")
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite measure")
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def zeros(cls, grid: Grid) -> "GridMeasure":
        return cls(grid, np.zeros(grid.n_nodes))

    @classmethod
    def dirac(cls, grid: Grid, point: Sequence[float], mass: float = 1.0) -> "GridMeasure":
        """Atom of the given mass at the node nearest to ``point``."""
        w = np.zeros(grid.n_nodes)
        w[grid.nearest_node(point)] = mass
        return cls(grid, w)

    def __add__(self, other: "GridMeasure") -> "GridMeasure":
        _check_same_grid(self.grid, other.grid)
        return GridMeasure(self.grid, self.weights + other.weights)

    def __sub__(self, other: "GridMeasure") -> "GridMeasure":
        _check_same_grid(self.grid, other.grid)
        return GridMeasure(self.grid, self.weights - other.weights)

    def __mul__(self, scalar: float) -> "GridMeasure":
        return GridMeasure(self.grid, float(scalar) * self.weights)

    __rmul__ = __mul__

    def __neg__(self) -> "GridMeasure":
        return GridMeasure(self.grid, -self.weights)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GridMeasure):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.weights, other.weights)

    __hash__ = None

    def mass(self, mask=None) -> float:
        """Measure of a union of cells (all cells when ``mask`` is None)."""
        if mask is None:
            return float(self.weights.sum())
        return float(self.weights[np.asarray(mask, dtype=bool)].sum())

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "GridMeasure":
        return cls(Grid.from_dict(data["grid"]), np.asarray(data["weights"], dtype=float))


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Bounded function sampled at the grid nodes."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.shape != (self.grid.n_nodes,):
            raise ValueError(f"expected {self.grid.n_nodes} values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite function values")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def from_callable(cls, grid: Grid, fn) -> "GridFunction":
        """Evaluate ``fn`` on the ``(n_nodes, dim)`` node array."""
        return cls(grid, np.asarray(fn(grid.nodes), dtype=float))

    @classmethod
    def constant(cls, grid: Grid, value: float = 1.0) -> "GridFunction":
        return cls(grid, np.full(grid.n_nodes, float(value)))

    @classmethod
    def indicator(cls, grid: Grid, lower, upper) -> "GridFunction":
        """Indicator of the closed box ``[lower, upper]`` on the nodes."""
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        inside = np.all((grid.nodes >= lo) & (grid.nodes <= hi), axis=1)
        return cls(grid, inside.astype(float))

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, GridFunction):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class PairGridMeasure:
    """Signed atomic measure on grid x grid; ``weights[i, j]`` is the mass of cell_i x cell_j."""

    grid: Grid
    weights: np.ndarray

    def __post_init__(self):
        n = self.grid.n_nodes
        w = np.asarray(self.weights, dtype=float)
        if w.ndim == 1 and w.size == n * n:
            w = w.reshape(n, n)
        if w.shape != (n, n):
            raise ValueError(f"expected a {n}x{n} weight matrix, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite measure")
        object.__setattr__(self, "weights", _frozen(w))

    def row(self, i: int) -> GridMeasure:
        """The measure B -> C(cell_i x B)."""
        return GridMeasure(self.grid, self.weights[i])

    def __eq__(self, other) -> bool:
        if not isinstance(other, PairGridMeasure):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.weights, other.weights)

    __hash__ = None

    def to_dict(self) -> dict:
        return {"grid": self.grid.to_dict(), "weights": self.weights.ravel().tolist()}


class CovarianceGridMeasure(PairGridMeasure):
    """Symmetric pair measure, the discrete covariance measure C_M.

    Symmetry is checked exactly; nothing here averages the matrix with its
    transpose. Positive semi-definiteness is checked separately with
    :func:`psd_check`.
    """

    def __post_init__(self):
        super().__post_init__()
        w = self.weights
        if not np.array_equal(w, w.T):
            raise ValueError("covariance weights not symmetric")

    def __add__(self, other: "CovarianceGridMeasure") -> "CovarianceGridMeasure":
        _check_same_grid(self.grid, other.grid)
        return CovarianceGridMeasure(self.grid, self.weights + other.weights)

    def __sub__(self, other: "CovarianceGridMeasure") -> "CovarianceGridMeasure":
        _check_same_grid(self.grid, other.grid)
        return CovarianceGridMeasure(self.grid, self.weights - other.weights)

    def __mul__(self, scalar: float) -> "CovarianceGridMeasure":
        return CovarianceGridMeasure(self.grid, float(scalar) * self.weights)

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, grid: Grid) -> "CovarianceGridMeasure":
        return cls(grid, np.zeros((grid.n_nodes, grid.n_nodes)))

    @classmethod
    def from_dict(cls, data: dict) -> "CovarianceGridMeasure":
        return cls(Grid.from_dict(data["grid"]), np.asarray(data["weights"], dtype=float))


def _function_values(phi, grid: Grid) -> np.ndarray:
    if isinstance(phi, GridFunction):
        _check_same_grid(phi.grid, grid)
        return phi.values
    v = np.asarray(phi, dtype=float).ravel()
    if v.shape != (grid.n_nodes,):
        raise GridMismatchError(f"expected {grid.n_nodes} node values, got {v.size}")
    return v


def total_variation(mu) -> float:
    """|mu|(R^d): the sum of absolute atom weights (also for pair measures)."""
    w = mu.weights
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite measure")
    return float(np.abs(w).sum())


def integrate(mu: GridMeasure, phi) -> float:
    """<mu, phi> = sum_i weights[i] * phi[i]."""
    return float(mu.weights @ _function_values(phi, mu.grid))


def pair_integrate(C: PairGridMeasure, phi, psi=None) -> float:
    """<C, phi (x) psi>; ``psi`` defaults to ``phi``."""
    a = _function_values(phi, C.grid)
    b = a if psi is None else _function_values(psi, C.grid)
    return float(a @ C.weights @ b)


def cdf(mu: GridMeasure, u) -> float:
    """mu((-inf, u]) with the product-interval convention in d = 2."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (mu.grid.dim,):
        raise ValueError(f"point must have {mu.grid.dim} coordinates")
    below = np.all(mu.grid.nodes <= u, axis=1)
    return float(mu.weights[below].sum())


def tensor(mu: GridMeasure, nu: GridMeasure) -> PairGridMeasure:
    """Product measure mu (x) nu; a :class:`CovarianceGridMeasure` when mu == nu."""
    _check_same_grid(mu.grid, nu.grid)
    w = np.outer(mu.weights, nu.weights)
    if mu is nu or np.array_equal(mu.weights, nu.weights):
        return CovarianceGridMeasure(mu.grid, w)
    return PairGridMeasure(mu.grid, w)


def tv_of_partial_application(C: PairGridMeasure, phi) -> float:
    """Total variation of the measure B -> <C, phi (x) 1_B>."""
    psi = _function_values(phi, C.grid) @ C.weights
    return float(np.abs(psi).sum())


def psd_check(C: PairGridMeasure, tol: float = PSD_TOL) -> bool:
    """True iff min eigenvalue >= -tol * max |eigenvalue| (>= -tol if all vanish)."""
    eig = np.linalg.eigvalsh(C.weights)
    if eig.size == 0:
        return True
    scale = float(np.max(np.abs(eig)))
    if scale == 0.0:
        return bool(eig.min() >= -tol)
    return bool(eig.min() >= -tol * scale)


def boundary_mass_fraction(C) -> float:
    """Share of the total variation carried by the outermost cell layer.

    For a pair measure the boundary layer is ``(boundary x R^d) u (R^d x boundary)``.
    """
    mask = C.grid.boundary_mask
    absw = np.abs(C.weights)
    total = absw.sum()
    if total == 0:
        return 0.0
    if absw.ndim == 1:
        return float(absw[mask].sum() / total)
    inner = ~mask
    return float(1.0 - absw[np.ix_(inner, inner)].sum() / total)


def warn_if_boundary_mass(C, threshold: float = BOUNDARY_MASS_FRACTION) -> float:
    frac = boundary_mass_fraction(C)
    if frac > threshold:
        warnings.warn(
            f"{100 * frac:.1f}% of the total variation sits on the boundary cells; "
            "the truncated box may be too small",
            TruncationWarning,
            stacklevel=3,
        )
    return frac
