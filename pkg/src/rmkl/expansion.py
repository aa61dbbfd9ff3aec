"""Karhunen-Loeve expansion of a finite regular random measure on a grid.

Pipeline: ``C_M -> K = O(C_M) -> eigenpairs (sigma_j^2, f_j) in L^2(nu) ->
mu_j`` with ``O(mu_j) = f_j``, so that ``C_M = sum_j sigma_j^2 mu_j (x) mu_j``
and ``<M, phi> = sum_j X_j <mu_j, phi>`` with uncorrelated ``X_j``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .measure_core import (
    CovarianceGridMeasure,
    Grid,
    GridFunction,
    GridMeasure,
    _check_same_grid,
    _function_values,
    pair_integrate,
    total_variation,
    tv_of_partial_application,
    warn_if_boundary_mass,
)
from .regularizer import antiderivative_cov, antiderivative_matrix
from .spectral import (
    RANK_TOL,
    EigenSystem,
    WeightMeasure,
    build_weight_measure,
    discrete_trace,
    eigendecompose,
    factored_eigendecompose,
)

__all__ = [
    "KLBasis",
    "construct_mu",
    "kl_expand",
    "regulated_expand",
    "reconstruct_covariance",
    "reconstruct_form",
    "tv_residual",
    "tv_residual_curve",
    "coefficients",
    "mean_square_residual",
    "mean_square_residual_curve",
    "process_expansion",
    "synthesize",
    "InvariantResult",
    "check_invariants",
    "first_failure",
]


@dataclass(frozen=True, eq=False)
class KLBasis:
    """Terms ``(sigma2[j], mu[j], f[j])`` of an expansion, strongest first.

    ``mu`` and ``f`` are ``(rank, n_nodes)`` arrays. For a regulated basis,
    ``regulator`` holds the node values of f and ``f`` are the eigenfunctions
    of the inner (finite) problem, so ``O(mu[j] / regulator) = f[j]``.
    """

    grid: Grid
    sigma2: np.ndarray
    mu: np.ndarray
    f: np.ndarray
    weight: WeightMeasure
    source_tv: float
    rank_tol: float = RANK_TOL
    regulator: np.ndarray | None = None

    def __post_init__(self):
        n = self.grid.n_nodes
        s = np.asarray(self.sigma2, dtype=float).ravel()
        mu = np.asarray(self.mu, dtype=float).reshape(s.size, n)
        f = np.asarray(self.f, dtype=float).reshape(s.size, n)
        for name, a in (("sigma2", s), ("mu", mu), ("f", f)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.regulator is not None:
            r = np.asarray(self.regulator, dtype=float).ravel()
            if r.shape != (n,):
                raise ValueError(f"regulator needs {n} node values")
            r.setflags(write=False)
            object.__setattr__(self, "regulator", r)

    @property
    def rank(self) -> int:
        return int(self.sigma2.size)

    @property
    def terms(self) -> list[tuple[float, GridMeasure, GridFunction]]:
        return [
            (float(s), GridMeasure(self.grid, m), GridFunction(self.grid, f))
            for s, m, f in zip(self.sigma2, self.mu, self.f)
        ]

    def inner_measures(self) -> np.ndarray:
        """Rows ``mu_j / f`` (the finite measures of the regulated problem)."""
        if self.regulator is None:
            return self.mu
        return self.mu / self.regulator

    def to_dict(self) -> dict:
        out = {
            "terms": [
                {"sigma2": float(s), "mu_weights": m.tolist(), "f_values": f.tolist()}
                for s, m, f in zip(self.sigma2, self.mu, self.f)
            ],
            "grid": self.grid.to_dict(),
            "source_tv": self.source_tv,
            "rank_tol": self.rank_tol,
            "nu": self.weight.name,
        }
        if self.regulator is not None:
            out["regulator"] = self.regulator.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "KLBasis":
        """Load without checking invariants; see :func:`check_invariants`."""
        grid = Grid.from_dict(data["grid"])
        n = grid.n_nodes
        terms = data.get("terms", [])
        sigma2 = np.array([float(t["sigma2"]) for t in terms])
        mu = np.array([t["mu_weights"] for t in terms], dtype=float).reshape(len(terms), n)
        f = np.array([t["f_values"] for t in terms], dtype=float).reshape(len(terms), n)
        reg = data.get("regulator")
        return cls(
            grid,
            sigma2,
            mu,
            f,
            build_weight_measure(grid),
            float(data.get("source_tv", np.nan)),
            float(data.get("rank_tol", RANK_TOL)),
            None if reg is None else np.asarray(reg, dtype=float),
        )


def construct_mu(C: CovarianceGridMeasure, eig: EigenSystem, w: WeightMeasure, j: int) -> GridMeasure:
    """mu_j(cell_i) = (1/sigma_j^2) sum_k O(C(cell_i x .))(x_k) f_j(x_k) w_k."""
    _check_same_grid(C.grid, eig.grid)
    if not 0 <= j < eig.rank:
        raise IndexError(f"term {j} out of range for rank {eig.rank}")
    sigma2 = float(eig.eigenvalues[j])
    if sigma2 <= 0:
        raise ValueError("null eigenvalue: mu_j undefined")
    A = antiderivative_matrix(C.grid)
    # column i of A @ C^T is O applied to row i of C
    rows = A @ C.weights.T
    return GridMeasure(C.grid, (eig.eigenfunctions[j] * w.quadrature_weights) @ rows / sigma2)


def kl_expand(
    C: CovarianceGridMeasure,
    w: WeightMeasure | None = None,
    rank_tol: float = RANK_TOL,
    method: str = "factored",
) -> KLBasis:
    """Expansion measures and variances of the random measure with covariance C.

    ``method="factored"`` (default) obtains the eigenpairs and measures from
    one SVD, which keeps ``O(mu_j) = f_j`` accurate for tiny eigenvalues.
    ``method="nystrom"`` eigendecomposes ``D K D`` and applies
    :func:`construct_mu` term by term.
    """
    w = build_weight_measure(C.grid) if w is None else w
    warn_if_boundary_mass(C)
    if method == "factored":
        eig, mus = factored_eigendecompose(C, w, rank_tol)
    elif method == "nystrom":
        eig = eigendecompose(C, w, rank_tol)
        mus = np.array([construct_mu(C, eig, w, j).weights for j in range(eig.rank)]).reshape(eig.rank, C.grid.n_nodes)
    else:
        raise ValueError(f"unknown method {method!r}")
    if eig.rank == 0 and np.any(C.weights != 0):
        warnings.warn("no eigenvalue above the rank threshold; basis is empty", RuntimeWarning, stacklevel=2)
    return KLBasis(C.grid, eig.eigenvalues, mus, eig.eigenfunctions, w, total_variation(C), rank_tol)


def regulated_expand(
    C: CovarianceGridMeasure,
    f,
    w: WeightMeasure | None = None,
    rank_tol: float = RANK_TOL,
    method: str = "factored",
) -> KLBasis:
    """Expansion for a measure regulated by the strictly positive function ``f``.

    Expands ``C / (f (x) f)`` and multiplies each resulting measure by ``f``.
    """
    reg = _function_values(f, C.grid)
    if not np.all(reg > 0):
        raise ValueError("regulator not strictly positive")
    inner = CovarianceGridMeasure(C.grid, C.weights / np.multiply.outer(reg, reg))
    base = kl_expand(inner, w, rank_tol, method)
    mu = base.mu * reg
    if not np.all(np.isfinite(np.abs(base.mu).sum(axis=1))):
        raise ValueError("(1/f) mu_j has infinite total variation")
    return KLBasis(C.grid, base.sigma2, mu, base.f, base.weight, total_variation(C), rank_tol, reg)


def _check_n(basis: KLBasis, n: int) -> int:
    n = int(n)
    if n < 0 or n > basis.rank:
        raise ValueError(f"n = {n} exceeds rank {basis.rank}")
    return n


def reconstruct_covariance(basis: KLBasis, n: int | None = None) -> CovarianceGridMeasure:
    """sum_{j<n} sigma_j^2 mu_j (x) mu_j (all terms when n is None)."""
    n = basis.rank if n is None else _check_n(basis, n)
    M = basis.mu[:n]
    R = (M.T * basis.sigma2[:n]) @ M
    return CovarianceGridMeasure(basis.grid, 0.5 * (R + R.T))


def _term_integrals(basis: KLBasis, phi) -> np.ndarray:
    return basis.mu @ _function_values(phi, basis.grid)


def reconstruct_form(basis: KLBasis, phi, psi, n: int | None = None) -> float:
    """Partial sum of Lambda(phi, psi) = sum_j sigma_j^2 <mu_j, phi><mu_j, psi>."""
    n = basis.rank if n is None else _check_n(basis, n)
    a = _term_integrals(basis, phi)[:n]
    b = _term_integrals(basis, psi)[:n]
    return float(np.sum(basis.sigma2[:n] * a * b))


def tv_residual(basis: KLBasis, C: CovarianceGridMeasure, phi, n: int) -> float:
    """|<C, phi (x) .> - sum_{j<n} sigma_j^2 <mu_j, phi> mu_j|(R^d)."""
    _check_same_grid(basis.grid, C.grid)
    n = _check_n(basis, n)
    v = _function_values(phi, C.grid)
    a = basis.mu[:n] @ v
    psi = v @ C.weights - (basis.sigma2[:n] * a) @ basis.mu[:n]
    return float(np.abs(psi).sum())


def tv_residual_curve(basis: KLBasis, C: CovarianceGridMeasure, phi) -> np.ndarray:
    """tv_residual for n = 0..rank in one pass."""
    _check_same_grid(basis.grid, C.grid)
    v = _function_values(phi, C.grid)
    a = basis.mu @ v
    psi = v @ C.weights
    out = [float(np.abs(psi).sum())]
    for j in range(basis.rank):
        psi = psi - basis.sigma2[j] * a[j] * basis.mu[j]
        out.append(float(np.abs(psi).sum()))
    return np.array(out)


def mean_square_residual(basis: KLBasis, C: CovarianceGridMeasure, phi, n: int) -> float:
    """E|<M, phi> - sum_{j<n} X_j <mu_j, phi>|^2 = <C, phi (x) phi> - sum_{j<n} sigma_j^2 <mu_j, phi>^2."""
    _check_same_grid(basis.grid, C.grid)
    n = _check_n(basis, n)
    a = _term_integrals(basis, phi)[:n]
    return pair_integrate(C, phi) - float(np.sum(basis.sigma2[:n] * a**2))


def mean_square_residual_curve(basis: KLBasis, C: CovarianceGridMeasure, phi) -> np.ndarray:
    a = _term_integrals(basis, phi)
    return pair_integrate(C, phi) - np.concatenate([[0.0], np.cumsum(basis.sigma2 * a**2)])


def _path_matrix(paths, grid: Grid) -> np.ndarray:
    from .simulate import SamplePath

    if isinstance(paths, SamplePath):
        _check_same_grid(paths.grid, grid)
        return paths.atom_values[None, :]
    if isinstance(paths, GridMeasure):
        _check_same_grid(paths.grid, grid)
        return paths.weights[None, :]
    if isinstance(paths, np.ndarray):
        X = np.atleast_2d(np.asarray(paths, dtype=float))
    else:
        rows = []
        for p in paths:
            if isinstance(p, SamplePath):
                _check_same_grid(p.grid, grid)
                rows.append(p.atom_values)
            else:
                rows.append(np.asarray(p, dtype=float))
        X = np.array(rows, dtype=float).reshape(len(rows), -1) if rows else np.zeros((0, grid.n_nodes))
    if X.shape[1] != grid.n_nodes:
        raise ValueError(f"paths need {grid.n_nodes} atom values, got {X.shape[1]}")
    return X


def coefficients(basis: KLBasis, path) -> np.ndarray:
    """X_j = int O(M)(y) f_j(y) dnu(y) for one path (1-D result) or many (2-D)."""
    single = not isinstance(path, (list, tuple)) and not (isinstance(path, np.ndarray) and path.ndim == 2)
    X = _path_matrix(path, basis.grid)
    if basis.regulator is not None:
        X = X / basis.regulator
    U = X @ antiderivative_matrix(basis.grid).T
    out = (U * basis.weight.quadrature_weights) @ basis.f.T
    return out[0] if single else out


def process_expansion(basis: KLBasis, x) -> np.ndarray:
    """g_j(x) = mu_j((-inf, x]) for every term."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (basis.grid.dim,):
        raise ValueError(f"point must have {basis.grid.dim} coordinates")
    below = np.all(basis.grid.nodes <= x, axis=1)
    return basis.mu[:, below].sum(axis=1)


def synthesize(basis: KLBasis, coeffs, n: int | None = None) -> np.ndarray:
    """Atom values of M_n = sum_{j<n} X_j mu_j for coefficient rows."""
    n = basis.rank if n is None else _check_n(basis, n)
    Z = np.atleast_2d(np.asarray(coeffs, dtype=float))
    return Z[:, :n] @ basis.mu[:n]


@dataclass(frozen=True)
class InvariantResult:
    name: str
    passed: bool
    detail: str = ""


def check_invariants(
    basis: KLBasis,
    C: CovarianceGridMeasure | None = None,
    test_functions: Iterable | None = None,
    fj_rtol: float = 1e-6,
    ortho_tol: float = 1e-8,
    slack: float = 1e-8,
) -> list[InvariantResult]:
    """Structural and convergence invariants of a basis, in a fixed order."""
    res: list[InvariantResult] = []
    s = basis.sigma2
    res.append(InvariantResult("eigenvalues descending", bool(np.all(np.diff(s) <= 0)), ""))
    res.append(InvariantResult("eigenvalues positive", bool(np.all(s > 0)), ""))

    A = antiderivative_matrix(basis.grid)
    nu_mu = basis.inner_measures()
    if basis.rank:
        err = np.abs(nu_mu @ A.T - basis.f).max(axis=1) / np.maximum(np.abs(basis.f).max(axis=1), 1e-300)
        worst = float(err.max())
    else:
        worst = 0.0
    res.append(InvariantResult("f_j = O(mu_j)", worst <= fj_rtol, f"max rel err {worst:.3e}"))

    wq = basis.weight.quadrature_weights
    gram = (basis.f * wq) @ basis.f.T
    ortho = float(np.abs(gram - np.eye(basis.rank)).max()) if basis.rank else 0.0
    res.append(InvariantResult("orthonormality", ortho <= ortho_tol, f"max dev {ortho:.3e}"))

    if C is None:
        return res
    _check_same_grid(basis.grid, C.grid)
    inner = C
    if basis.regulator is not None:
        r = basis.regulator
        inner = CovarianceGridMeasure(C.grid, C.weights / np.multiply.outer(r, r))
    trace = discrete_trace(antiderivative_cov(inner), basis.weight)
    total = float(s.sum())
    res.append(
        InvariantResult(
            "summable variances", total <= trace * (1 + 1e-8) + 1e-300, f"sum {total:.6e} vs trace {trace:.6e}"
        )
    )
    funcs = [np.ones(basis.grid.n_nodes)] if test_functions is None else [np.asarray(_function_values(p, basis.grid)) for p in test_functions]
    dom_ok, tv_ok, ms_ok = True, True, True
    tv_scale = total_variation(C)
    for v in funcs:
        form_c = pair_integrate(C, v)
        a = basis.mu @ v
        partial = np.concatenate([[0.0], np.cumsum(s * a**2)])
        if np.any(partial < -slack) or np.any(partial > form_c + slack * max(1.0, abs(form_c))):
            dom_ok = False
        curve = tv_residual_curve(basis, C, v)
        if np.any(np.diff(curve) > 1e-10 * max(1.0, tv_scale)):
            tv_ok = False
        ms = form_c - partial
        if np.any(np.diff(ms) > 1e-10 * max(1.0, abs(form_c))):
            ms_ok = False
    res.append(InvariantResult("domination", dom_ok))
    res.append(InvariantResult("tv residual nonincreasing", tv_ok))
    res.append(InvariantResult("mean-square residual nonincreasing", ms_ok))
    return res


def first_failure(results: Sequence[InvariantResult]) -> InvariantResult | None:
    for r in results:
        if not r.passed:
            return r
    return None
