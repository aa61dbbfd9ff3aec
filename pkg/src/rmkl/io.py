"""File formats: JSON documents for grids, measures and bases; CSV for paths and tables.

Floats are written with Python's shortest round-trip repr, so every float64
survives a write/read cycle bit for bit. All writes go to a temporary file in
the target directory and are then renamed over the destination.
"""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .expansion import KLBasis
from .measure_core import CovarianceGridMeasure, Grid, GridMeasure
from .spectral import EigenSystem

__all__ = [
    "atomic_write_text",
    "write_json",
    "read_json",
    "write_csv",
    "read_csv",
    "save_measure",
    "load_measure",
    "save_covariance",
    "load_covariance",
    "save_basis",
    "load_basis",
    "save_eigensystem",
    "load_eigensystem",
    "node_labels",
    "write_paths_csv",
    "read_paths_csv",
]


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, data: dict) -> Path:
    return atomic_write_text(path, json.dumps(data, indent=1, allow_nan=False) + "\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return atomic_write_text(path, buf.getvalue())


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def save_measure(path, mu: GridMeasure) -> Path:
    return write_json(path, mu.to_dict())


def load_measure(path) -> GridMeasure:
    return GridMeasure.from_dict(read_json(path))


def save_covariance(path, C: CovarianceGridMeasure) -> Path:
    return write_json(path, C.to_dict())


def load_covariance(path) -> CovarianceGridMeasure:
    return CovarianceGridMeasure.from_dict(read_json(path))


def save_basis(path, basis: KLBasis) -> Path:
    return write_json(path, basis.to_dict())


def load_basis(path) -> KLBasis:
    return KLBasis.from_dict(read_json(path))


def save_eigensystem(path, eig: EigenSystem) -> Path:
    return write_json(path, eig.to_dict())


def load_eigensystem(path) -> EigenSystem:
    return EigenSystem.from_dict(read_json(path))


def node_labels(grid: Grid) -> list[str]:
    """Column headers: node coordinates, joined by ';' in d = 2."""
    return [";".join(repr(float(c)) for c in node) for node in grid.nodes]


def write_paths_csv(path, grid: Grid, values: np.ndarray, seed: int, algorithm: str, start: int = 0) -> Path:
    """One row per path plus a ``<name>.seed.json`` sidecar."""
    values = np.asarray(values, dtype=float).reshape(-1, grid.n_nodes)
    out = write_csv(path, node_labels(grid), values.tolist())
    write_json(
        Path(path).with_suffix(".seed.json"),
        {"seed": int(seed), "algorithm": algorithm, "first_index": int(start), "count": int(values.shape[0]),
         "grid": grid.to_dict()},
    )
    return out


def read_paths_csv(path, grid: Grid | None = None) -> np.ndarray:
    header, rows = read_csv(path)
    if grid is not None and header != node_labels(grid):
        raise ValueError(f"{path}: header does not match the grid nodes")
    if not rows:
        return np.zeros((0, len(header)))
    return np.array([[float(v) for v in r] for r in rows])
