"""Gaussian random measures on a grid and Monte-Carlo checks.

Paths are vectors of atom values ``M(cell_i)``. Path ``k`` of a run with seed
``s`` draws its standard normals from ``Generator(Philox(key=s).jumped(k))``:
Philox is counter based, so every path has its own stream and the result does
not depend on how paths are scheduled.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

from .exceptions import FactorizationError, NotPSDError
from .measure_core import (
    CovarianceGridMeasure,
    Grid,
    GridMeasure,
    _check_same_grid,
    psd_check,
    total_variation,
)

__all__ = [
    "RngSpec",
    "SamplePath",
    "psd_factor_pivoted",
    "sample_gaussian",
    "sample_gaussian_array",
    "white_noise_cov",
    "orthogonal_cov",
    "empirical_covariance",
    "FubiniResult",
    "fubini_check",
]

RNG_ALGORITHM = "numpy-philox4x64-jumped-per-path"
RANK_TRUNCATION = 1e-10
INPUT_PSD_TOL = 1e-6


@dataclass(frozen=True)
class RngSpec:
    seed: int
    algorithm: str = RNG_ALGORITHM

    def __post_init__(self):
        seed = int(self.seed)
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.algorithm != RNG_ALGORITHM:
            raise ValueError(f"unsupported RNG algorithm {self.algorithm!r}")
        object.__setattr__(self, "seed", seed)

    def generator(self, index: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.seed).jumped(index))


@dataclass(frozen=True, eq=False)
class SamplePath:
    grid: Grid
    atom_values: np.ndarray
    seed: int
    index: int = 0

    def __post_init__(self):
        v = np.asarray(self.atom_values, dtype=float).ravel()
        if v.shape != (self.grid.n_nodes,):
            raise ValueError(f"expected {self.grid.n_nodes} atom values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite path")
        v.setflags(write=False)
        object.__setattr__(self, "atom_values", v)

    def measure(self) -> GridMeasure:
        return GridMeasure(self.grid, self.atom_values)

    def mass(self, mask) -> float:
        """M(A) for A a union of cells given by a boolean mask."""
        return float(self.atom_values[np.asarray(mask, dtype=bool)].sum())


def psd_factor_pivoted(C: CovarianceGridMeasure, rel_tol: float = RANK_TRUNCATION) -> np.ndarray:
    """``L`` with ``C ~= L L^T`` from LAPACK's pivoted Cholesky (``?pstrf``).

    Pivots with diagonal below ``rel_tol * max(diag)`` end the factorization,
    so rank-deficient covariances give a thin factor.
    """
    W = np.array(C.weights, dtype=float, order="F")
    n = W.shape[0]
    dmax = float(np.max(np.diag(W))) if n else 0.0
    if dmax <= 0:
        if np.any(W != 0):
            raise FactorizationError("C not factorizable")
        return np.zeros((n, 0))
    c, piv, rank, info = lapack.dpstrf(W, lower=1, tol=rel_tol * dmax)
    if info < 0:
        raise FactorizationError("C not factorizable")
    Lp = np.tril(c)[:, :rank]
    L = np.zeros((n, rank))
    L[piv - 1] = Lp
    resid = float(np.max(np.abs(L @ L.T - C.weights)))
    if resid > max(1e-6 * dmax, 1e3 * rel_tol * dmax):
        raise FactorizationError(f"C not factorizable (residual {resid:.3e})")
    return L


def sample_gaussian_array(C: CovarianceGridMeasure, rng: RngSpec, count: int, start: int = 0) -> np.ndarray:
    """``(count, n_nodes)`` array of centred Gaussian atom vectors with covariance C."""
    if count < 0:
        raise ValueError("count must be non-negative")
    if not psd_check(C, INPUT_PSD_TOL):
        raise NotPSDError("covariance not PSD")
    L = psd_factor_pivoted(C)
    r = L.shape[1]
    Z = np.empty((count, r))
    for k in range(count):
        Z[k] = rng.generator(start + k).standard_normal(r)
    return Z @ L.T


def sample_gaussian(C: CovarianceGridMeasure, rng: RngSpec, count: int) -> list[SamplePath]:
    X = sample_gaussian_array(C, rng, count)
    return [SamplePath(C.grid, x, rng.seed, k) for k, x in enumerate(X)]


def white_noise_cov(grid: Grid, window) -> CovarianceGridMeasure:
    """C_W(A x B) = |A n B n window| on grid atoms (cells with midpoint in the window)."""
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in window)
    if lo.shape != (grid.dim,) or hi.shape != (grid.dim,):
        raise ValueError(f"window bounds need {grid.dim} coordinates")
    if not np.all(lo < hi):
        raise ValueError("empty window")
    if not grid.contains(lo, hi):
        raise ValueError("window not inside grid box")
    inside = np.all((grid.nodes >= lo) & (grid.nodes <= hi), axis=1)
    if not inside.any():
        raise ValueError("empty window")
    return CovarianceGridMeasure(grid, np.diag(np.where(inside, grid.cell_volume, 0.0)))


def orthogonal_cov(control: GridMeasure) -> CovarianceGridMeasure:
    """C(A x B) = control(A n B)."""
    if np.any(control.weights < 0):
        raise ValueError("negative control weight")
    return CovarianceGridMeasure(control.grid, np.diag(control.weights))


def empirical_covariance(paths) -> CovarianceGridMeasure:
    """Unbiased sample covariance (divisor N - 1) of the atom vectors."""
    if isinstance(paths, np.ndarray):
        raise TypeError("pass SamplePath objects; use np.cov for raw arrays")
    paths = list(paths)
    if len(paths) < 2:
        raise ValueError("need at least 2 paths")
    grid = paths[0].grid
    for p in paths[1:]:
        _check_same_grid(grid, p.grid)
    X = np.array([p.atom_values for p in paths])
    Xc = X - X.mean(axis=0)
    S = Xc.T @ Xc / (len(paths) - 1)
    return CovarianceGridMeasure(grid, 0.5 * (S + S.T))


@dataclass(frozen=True)
class FubiniResult:
    lhs: np.ndarray
    rhs: np.ndarray
    gap: float
    variance: float
    scale: float


def fubini_check(
    C: CovarianceGridMeasure, psi, aux_measure: GridMeasure, rng: RngSpec, n_paths: int
) -> FubiniResult:
    """Both iterated integrals of psi against (M, aux) on simulated paths.

    ``lhs = int (int psi(x, u) daux(u)) dM(x)`` and
    ``rhs = int (int psi(x, u) dM(x)) daux(u)``. ``variance`` is the Monte-Carlo
    mean of ``(lhs - rhs)^2`` and ``scale = max|psi| tv(aux) sqrt(tv(C))``.
    """
    psi = np.asarray(psi, dtype=float)
    if psi.shape != (C.grid.n_nodes, aux_measure.grid.n_nodes):
        raise ValueError(
            f"psi must have shape ({C.grid.n_nodes}, {aux_measure.grid.n_nodes}), got {psi.shape}"
        )
    if not np.all(np.isfinite(psi)):
        raise ValueError("non-finite psi")
    paths = sample_gaussian_array(C, rng, n_paths)
    inner_aux = psi @ aux_measure.weights
    lhs = paths @ inner_aux
    inner_m = paths @ psi
    rhs = inner_m @ aux_measure.weights
    diff = lhs - rhs
    gap = float(np.max(np.abs(diff))) if n_paths else 0.0
    variance = float(np.mean(diff**2)) if n_paths else 0.0
    scale = float(np.max(np.abs(psi))) * total_variation(aux_measure) * np.sqrt(total_variation(C)) if psi.size else 0.0
    return FubiniResult(lhs, rhs, gap, variance, scale)
