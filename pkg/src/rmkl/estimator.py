"""scikit-learn style front end.

:class:`RandomMeasureKL` learns an expansion either from a covariance measure
(:meth:`~RandomMeasureKL.fit_covariance`) or from sampled atom vectors
(:meth:`~RandomMeasureKL.fit`, using their sample covariance), then maps
atom vectors to expansion coefficients and back.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .expansion import (
    KLBasis,
    coefficients,
    kl_expand,
    reconstruct_covariance,
    regulated_expand,
    synthesize,
)
from .measure_core import CovarianceGridMeasure, Grid, GridFunction
from .regulator_expr import evaluate_regulator
from .spectral import RANK_TOL, build_weight_measure


def check_grid(grid) -> Grid:
    if isinstance(grid, Grid):
        return grid
    if isinstance(grid, dict):
        return Grid.from_dict(grid)
    raise TypeError(f"grid must be a Grid or a grid dict, got {type(grid).__name__}")


def check_atoms(X, grid: Grid, name: str = "X") -> np.ndarray:
    """2-D float array with one column per grid node."""
    X = check_array(X, dtype=np.float64, ensure_2d=True, input_name=name)
    if X.shape[1] != grid.n_nodes:
        raise ValueError(f"{name} has {X.shape[1]} columns but the grid has {grid.n_nodes} nodes")
    return X


def resolve_regulator(regulator, grid: Grid) -> np.ndarray | None:
    """Node values of a regulator given as None, a string, a callable or an array."""
    if regulator is None:
        return None
    if isinstance(regulator, str):
        return evaluate_regulator(regulator, grid)
    if isinstance(regulator, GridFunction):
        return regulator.values
    if callable(regulator):
        return np.asarray(regulator(grid.nodes), dtype=float).ravel()
    return np.asarray(regulator, dtype=float).ravel()


class RandomMeasureKL(TransformerMixin, BaseEstimator):
    """Karhunen-Loeve expansion of a random measure on a fixed grid.

    Parameters
    ----------
    grid : Grid
        Discretisation shared by every input.
    rank_tol : float, default=1e-12
        Eigenvalues below ``rank_tol * max`` are dropped.
    n_components : int or None
        Keep only the leading terms after fitting.
    regulator : None, str, callable or array
        Strictly positive regulating function; selects the regulated pipeline.
    method : {"factored", "nystrom"}
    """

    def __init__(self, grid=None, rank_tol=RANK_TOL, n_components=None, regulator=None, method="factored"):
        self.grid = grid
        self.rank_tol = rank_tol
        self.n_components = n_components
        self.regulator = regulator
        self.method = method

    def _validate(self) -> Grid:
        if self.grid is None:
            raise ValueError("grid must be set before fitting")
        grid = check_grid(self.grid)
        if not self.rank_tol >= 0:
            raise ValueError("rank_tol must be non-negative")
        if self.n_components is not None and int(self.n_components) < 0:
            raise ValueError("n_components must be non-negative")
        return grid

    def fit(self, X, y=None):
        """Fit on sampled atom vectors (rows) through their sample covariance."""
        grid = self._validate()
        X = check_atoms(X, grid)
        if X.shape[0] < 2:
            raise ValueError("need at least 2 samples")
        Xc = X - X.mean(axis=0)
        S = Xc.T @ Xc / (X.shape[0] - 1)
        return self.fit_covariance(CovarianceGridMeasure(grid, 0.5 * (S + S.T)))

    def fit_covariance(self, C: CovarianceGridMeasure):
        grid = self._validate()
        if C.grid != grid:
            raise ValueError("covariance lives on a different grid")
        w = build_weight_measure(grid)
        reg = resolve_regulator(self.regulator, grid)
        if reg is None:
            basis = kl_expand(C, w, self.rank_tol, self.method)
        else:
            basis = regulated_expand(C, reg, w, self.rank_tol, self.method)
        if self.n_components is not None and self.n_components < basis.rank:
            k = int(self.n_components)
            basis = KLBasis(
                basis.grid, basis.sigma2[:k], basis.mu[:k], basis.f[:k], basis.weight,
                basis.source_tv, basis.rank_tol, basis.regulator,
            )
        self.covariance_ = C
        self.basis_ = basis
        self.n_components_ = basis.rank
        self.explained_variance_ = basis.sigma2
        self.components_ = basis.mu
        self.eigenfunctions_ = basis.f
        self.n_features_in_ = grid.n_nodes
        return self

    def transform(self, X):
        """Expansion coefficients X_j of each row."""
        check_is_fitted(self, "basis_")
        X = check_atoms(X, self.basis_.grid)
        return coefficients(self.basis_, X)

    def inverse_transform(self, Z):
        """Atom values of sum_j Z_j mu_j."""
        check_is_fitted(self, "basis_")
        Z = check_array(Z, dtype=np.float64, input_name="Z")
        if Z.shape[1] != self.n_components_:
            raise ValueError(f"expected {self.n_components_} coefficients per row, got {Z.shape[1]}")
        return synthesize(self.basis_, Z)

    def reconstructed_covariance(self) -> CovarianceGridMeasure:
        check_is_fitted(self, "basis_")
        return reconstruct_covariance(self.basis_)

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "basis_")
        return np.array([f"kl{j}" for j in range(self.n_components_)], dtype=object)
