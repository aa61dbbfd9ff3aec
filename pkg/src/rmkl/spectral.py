"""Weight measure nu and the covariance operator of O(M) on L^2(nu).

The operator ``phi -> int K(., y) phi(y) dnu(y)`` is discretised with Nystrom
quadrature at the grid nodes. With quadrature weights ``w`` the eigenproblem
``K diag(w) f = lambda f`` is symmetrised as ``D K D v = lambda v`` with
``D = diag(sqrt(w))`` and ``f = v / sqrt(w)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import NotPSDError, TraceBoundError
from .measure_core import (
    CovarianceGridMeasure,
    Grid,
    GridFunction,
    _check_same_grid,
    psd_check,
    total_variation,
)
from .regularizer import antiderivative_cov, antiderivative_matrix

__all__ = [
    "WeightMeasure",
    "EigenSystem",
    "weight_density",
    "build_weight_measure",
    "trace_bound",
    "discrete_trace",
    "nystrom_eigh",
    "eigendecompose",
    "factored_eigendecompose",
    "HALF_PI",
]

HALF_PI = math.pi / 2  # int_R t^2/(1+t^2)^2 dt
RANK_TOL = 1e-12
CLAMP_TOL = 1e-8
ASYMMETRY_TOL = 1e-10
INPUT_PSD_TOL = 1e-6
SIGN_TOL = 1e-12


def weight_density(points) -> np.ndarray:
    """1/p(x) with p(x) = prod_j (1 + x_j^2)^2."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    return 1.0 / np.prod((1.0 + x**2) ** 2, axis=1)


@dataclass(frozen=True, eq=False)
class WeightMeasure:
    grid: Grid
    density_values: np.ndarray
    quadrature_weights: np.ndarray
    name: str = "p-default"


def build_weight_measure(grid: Grid) -> WeightMeasure:
    density = weight_density(grid.nodes)
    q = density * grid.cell_volume
    density.setflags(write=False)
    q.setflags(write=False)
    return WeightMeasure(grid, density, q)


@dataclass(frozen=True, eq=False)
class EigenSystem:
    """Retained eigenpairs, eigenvalues descending.

    ``eigenfunctions`` has shape ``(rank, n_nodes)``; its rows are
    orthonormal for ``<f, g> = sum_k f[k] g[k] w[k]``.
    """

    grid: Grid
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    quadrature_weights: np.ndarray
    rank_tol: float = RANK_TOL
    nu: str = "p-default"
    discarded: int = field(default=0)

    @property
    def rank(self) -> int:
        return int(self.eigenvalues.size)

    def functions(self) -> list[GridFunction]:
        return [GridFunction(self.grid, f) for f in self.eigenfunctions]

    def gram(self) -> np.ndarray:
        F = self.eigenfunctions
        return (F * self.quadrature_weights) @ F.T

    def to_dict(self) -> dict:
        return {
            "eigenvalues": self.eigenvalues.tolist(),
            "eigenfunctions": self.eigenfunctions.tolist(),
            "grid": self.grid.to_dict(),
            "nu": self.nu,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EigenSystem":
        grid = Grid.from_dict(data["grid"])
        if data.get("nu", "p-default") != "p-default":
            raise ValueError(f"unsupported weight measure {data['nu']!r}")
        w = build_weight_measure(grid)
        vals = np.asarray(data["eigenvalues"], dtype=float)
        funcs = np.asarray(data["eigenfunctions"], dtype=float).reshape(vals.size, grid.n_nodes)
        return cls(grid, vals, funcs, w.quadrature_weights)


def discrete_trace(K: np.ndarray, w: WeightMeasure) -> float:
    """sum_k K[k, k] w[k], the quadrature of int C_U(x, x) dnu(x)."""
    return float(np.diag(K) @ w.quadrature_weights)


def trace_bound(C: CovarianceGridMeasure, w: WeightMeasure, tol: float = 1e-6) -> float:
    """Discrete trace of C_U = O(C_M) w.r.t. nu, checked against tv(C) (pi/2)^d."""
    _check_same_grid(C.grid, w.grid)
    trace = discrete_trace(antiderivative_cov(C), w)
    bound = total_variation(C) * HALF_PI**C.grid.dim
    if trace > bound + tol + 1e-12 * bound:
        raise TraceBoundError(f"trace bound violated: {trace!r} > {bound!r}")
    return trace


def _fix_signs(F: np.ndarray, *others: np.ndarray) -> None:
    """Make the first entry of each row of F with |.| > SIGN_TOL positive (in place)."""
    for j in range(F.shape[0]):
        big = np.flatnonzero(np.abs(F[j]) > SIGN_TOL)
        if big.size and F[j, big[0]] < 0:
            F[j] *= -1
            for o in others:
                o[j] *= -1


def nystrom_eigh(K, quadrature_weights, rank_tol: float = RANK_TOL, clamp_tol: float = CLAMP_TOL):
    """Eigenpairs of the quadrature-weighted kernel ``K``.

    Returns ``(eigenvalues, eigenfunctions, discarded)`` with eigenfunctions as
    rows, normalised in the weighted inner product.
    """
    K = np.asarray(K, dtype=float)
    w = np.asarray(quadrature_weights, dtype=float)
    if np.any(w <= 0):
        raise ValueError("quadrature weights must be positive")
    scale = float(np.max(np.abs(K))) if K.size else 0.0
    if scale == 0.0:
        return np.zeros(0), np.zeros((0, w.size)), w.size
    if float(np.max(np.abs(K - K.T))) > ASYMMETRY_TOL * scale:
        raise ValueError("kernel matrix not symmetric")
    K = 0.5 * (K + K.T)
    d = np.sqrt(w)
    lam, V = np.linalg.eigh(d[:, None] * K * d[None, :])
    order = np.argsort(lam)[::-1]
    lam, V = lam[order], V[:, order]
    top = lam[0]
    if top <= 0:
        if lam.min() < -clamp_tol * max(abs(lam.min()), scale):
            raise NotPSDError("operator not PSD")
        return np.zeros(0), np.zeros((0, w.size)), w.size
    if lam.min() < -clamp_tol * top:
        raise NotPSDError(f"operator not PSD: eigenvalue {lam.min()!r} below -{clamp_tol}*{top!r}")
    lam = np.where(lam < 0, 0.0, lam)
    keep = (lam > 0) & (lam >= rank_tol * top)
    F = (V[:, keep] / d[:, None]).T.copy()
    F /= np.sqrt((F**2) @ w)[:, None]
    _fix_signs(F)
    return lam[keep], F, int((~keep).sum())


def _check_input(C: CovarianceGridMeasure, w: WeightMeasure) -> None:
    _check_same_grid(C.grid, w.grid)
    if not psd_check(C, INPUT_PSD_TOL):
        raise NotPSDError("covariance not PSD")


def eigendecompose(
    C: CovarianceGridMeasure, w: WeightMeasure, rank_tol: float = RANK_TOL, clamp_tol: float = CLAMP_TOL
) -> EigenSystem:
    """Eigensystem of the covariance operator of O(M) in L^2(nu)."""
    _check_input(C, w)
    K = antiderivative_cov(C)
    lam, F, dropped = nystrom_eigh(K, w.quadrature_weights, rank_tol, clamp_tol)
    return EigenSystem(C.grid, lam, F, w.quadrature_weights, rank_tol, discarded=dropped)


def psd_factor(C: CovarianceGridMeasure, tol: float = INPUT_PSD_TOL) -> np.ndarray:
    """G with C = G G^T from the eigendecomposition, clipping eigenvalues at zero."""
    e, Q = np.linalg.eigh(C.weights)
    if e.size and e.min() < -tol * max(float(np.max(np.abs(e))), 0.0):
        raise NotPSDError("covariance not PSD")
    keep = e > 0
    return Q[:, keep] * np.sqrt(e[keep])


def factored_eigendecompose(C: CovarianceGridMeasure, w: WeightMeasure, rank_tol: float = RANK_TOL):
    """Same eigensystem as :func:`eigendecompose`, from an SVD of ``D A G``.

    With ``C = G G^T`` and A the anti-derivative matrix, ``D K D = B B^T`` for
    ``B = D A G``. The SVD ``B = U S R^T`` gives the eigenvalues ``S^2`` and
    eigenfunctions ``U / sqrt(w)`` as before, and additionally ``G R / S``,
    which equals ``(1/lambda) C A^T W f`` but is computed without dividing by
    ``lambda``. Returns ``(EigenSystem, measures)`` with the measures as rows.
    """
    _check_input(C, w)
    n = C.grid.n_nodes
    G = psd_factor(C)
    if G.shape[1] == 0:
        return EigenSystem(C.grid, np.zeros(0), np.zeros((0, n)), w.quadrature_weights, rank_tol, discarded=n), np.zeros((0, n))
    d = np.sqrt(w.quadrature_weights)
    B = d[:, None] * (antiderivative_matrix(C.grid) @ G)
    U, s, Rt = np.linalg.svd(B, full_matrices=False)
    lam = s**2
    if lam[0] <= 0:
        return EigenSystem(C.grid, np.zeros(0), np.zeros((0, n)), w.quadrature_weights, rank_tol, discarded=n), np.zeros((0, n))
    keep = (lam > 0) & (lam >= rank_tol * lam[0])
    F = (U[:, keep] / d[:, None]).T.copy()
    mus = ((G @ Rt[keep].T) / s[keep]).T.copy()
    _fix_signs(F, mus)
    eig = EigenSystem(C.grid, lam[keep], F, w.quadrature_weights, rank_tol, discarded=n - int(keep.sum()))
    return eig, mus
