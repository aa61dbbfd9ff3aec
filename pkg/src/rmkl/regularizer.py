"""The anti-derivative operator O(mu)(x) = int_0^x mu((-inf, u]) du on grids.

The cdf ``u -> mu((-inf, u])`` is taken piecewise constant on each cell, equal
to its value at the cell midpoint, and integrated exactly over the oriented box
between 0 and the target node. Each axis therefore contributes a matrix
``S_k @ L_k`` (``L_k`` cumulative sums, ``S_k`` signed overlap lengths) and the
full operator is their Kronecker product.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .exceptions import OriginNodeWarning
from .measure_core import (
    CovarianceGridMeasure,
    Grid,
    GridFunction,
    GridMeasure,
    _function_values,
    integrate,
    total_variation,
)

__all__ = [
    "SignedBoxIntegrand",
    "signed_box",
    "axis_antiderivative_matrix",
    "antiderivative_matrix",
    "antiderivative",
    "antiderivative_cov",
    "antiderivative_bound",
    "check_antiderivative_bound",
    "weak_derivative_residual",
]

SUPPORT_TOL = 1e-12


@dataclass(frozen=True)
class SignedBoxIntegrand:
    """Oriented box between the origin and ``target``.

    ``sign`` is (-1) ** (number of negative coordinates of ``target``).
    """

    target: tuple[float, ...]
    sign: int
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def volume(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))


def signed_box(y) -> SignedBoxIntegrand:
    y = tuple(float(v) for v in np.atleast_1d(y))
    neg = sum(v < 0 for v in y)
    return SignedBoxIntegrand(
        target=y,
        sign=-1 if neg % 2 else 1,
        lower=tuple(min(0.0, v) for v in y),
        upper=tuple(max(0.0, v) for v in y),
    )


def axis_antiderivative_matrix(lower: float, upper: float, n: int) -> np.ndarray:
    """One-dimensional operator matrix on ``n`` midpoint nodes of ``[lower, upper]``.

    Row ``i`` integrates the cell-wise constant cdf from 0 to node ``i``. When
    the origin lies above the box, the stretch between ``upper`` and 0 sees
    the full mass, carried by the last cumulative sum.
    """
    h = (upper - lower) / n
    edges = lower + h * np.arange(n + 1)
    t = 0.5 * (edges[:-1] + edges[1:])
    a = np.minimum(t, 0.0)[:, None]
    b = np.maximum(t, 0.0)[:, None]
    overlap = np.clip(np.minimum(b, edges[1:][None, :]) - np.maximum(a, edges[:-1][None, :]), 0.0, None)
    overlap[:, -1] += np.clip(b[:, 0] - np.maximum(a[:, 0], upper), 0.0, None)
    sign = np.where(t < 0, -1.0, 1.0)[:, None]
    S = sign * overlap
    L = np.tril(np.ones((n, n)))
    return S @ L


@lru_cache(maxsize=32)
def antiderivative_matrix(grid: Grid) -> np.ndarray:
    """Dense ``(n_nodes, n_nodes)`` matrix A with O(mu) = A @ mu.weights."""
    mats = []
    for k in range(grid.dim):
        t = grid.axis_nodes(k)
        if np.any(np.abs(t) <= 1e-12 * grid.spacing[k]):
            warnings.warn(
                f"axis {k} has a node at the origin; O vanishes there for every measure "
                "and is not injective on this grid",
                OriginNodeWarning,
                stacklevel=2,
            )
        mats.append(axis_antiderivative_matrix(grid.lower[k], grid.upper[k], grid.nodes_per_axis[k]))
    A = mats[0]
    for m in mats[1:]:
        A = np.kron(A, m)
    A.setflags(write=False)
    return A


def antiderivative(mu: GridMeasure) -> GridFunction:
    """O(mu) sampled at the nodes."""
    return GridFunction(mu.grid, antiderivative_matrix(mu.grid) @ mu.weights)


def antiderivative_cov(C: CovarianceGridMeasure) -> np.ndarray:
    """Covariance of O(M): O applied in both argument slots of C_M."""
    w = C.weights
    if not np.array_equal(w, w.T):
        raise ValueError("covariance weights not symmetric")
    A = antiderivative_matrix(C.grid)
    K = A @ w @ A.T
    K = 0.5 * (K + K.T)
    return K


def antiderivative_bound(grid: Grid, tv: float) -> np.ndarray:
    """|x_1|...|x_d| * tv at every node, the a-priori bound on |O(mu)|."""
    return np.prod(np.abs(grid.nodes), axis=1) * tv


def weak_derivative_residual(mu: GridMeasure, phi_smooth, d2d_phi) -> float:
    """|int O(mu) d^{2d}phi/dx_1^2..dx_d^2 dx - <mu, phi>| with the midpoint rule.

    ``phi_smooth`` and ``d2d_phi`` are node samples of a compactly supported
    test function and of its mixed second derivative, both supplied by the
    caller. Both must vanish on the outermost cell layer.
    """
    grid = mu.grid
    phi = _function_values(phi_smooth, grid)
    d2 = _function_values(d2d_phi, grid)
    scale = max(float(np.max(np.abs(phi))), float(np.max(np.abs(d2))), 1.0)
    edge = grid.boundary_mask
    if np.any(np.abs(phi[edge]) > SUPPORT_TOL * scale) or np.any(np.abs(d2[edge]) > SUPPORT_TOL * scale):
        raise ValueError("test function not compactly supported in box")
    lhs = float(antiderivative(mu).values @ d2) * grid.cell_volume
    return abs(lhs - integrate(mu, phi))


def check_antiderivative_bound(mu: GridMeasure, rtol: float = 1e-12) -> bool:
    """Whether |O(mu)| <= |x_1|...|x_d| tv(mu) holds at every node.

    ``rtol`` only absorbs floating-point rounding of the two sides.
    """
    vals = np.abs(antiderivative(mu).values)
    bound = antiderivative_bound(mu.grid, total_variation(mu))
    return bool(np.all(vals <= bound * (1 + rtol) + 1e-300))
