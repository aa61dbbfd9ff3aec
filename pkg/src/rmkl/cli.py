"""Command line: ``rmkl {expand,simulate,verify,report} --config job.json``.

Exit codes: 0 success, 1 verification failure, 2 configuration or parse
error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import NumericalError, RMKLError
from .expansion import (
    KLBasis,
    check_invariants,
    coefficients,
    kl_expand,
    mean_square_residual_curve,
    process_expansion,
    regulated_expand,
    tv_residual_curve,
)
from .io import (
    load_basis,
    load_covariance,
    load_measure,
    read_csv,
    save_basis,
    write_csv,
    write_paths_csv,
)
from .measure_core import (
    CovarianceGridMeasure,
    Grid,
    GridFunction,
    pair_integrate,
    psd_check,
    tensor,
    total_variation,
)
from .regulator_expr import evaluate_regulator
from .simulate import RNG_ALGORITHM, RngSpec, orthogonal_cov, sample_gaussian_array, white_noise_cov
from .spectral import RANK_TOL, build_weight_measure

log = logging.getLogger("rmkl")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("expand", "simulate", "verify", "report")
COMPLETENESS_RTOL = 1e-6
# reported but never fails a run: the total-variation residual need not shrink term by term
INFORMATIONAL = frozenset({"tv residual nonincreasing"})


class ConfigError(RMKLError, ValueError):
    pass


@dataclass
class JobConfig:
    command: str
    grid: Grid | None
    covariance: dict
    base_dir: Path
    regulator: str | None = None
    rank_tol: float = RANK_TOL
    seed: int = 0
    n_paths: int = 1000
    n_test_functions: int = 10
    basis: str | None = None
    output: Path = field(default_factory=lambda: Path("."))

    def resolve(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.base_dir / p


_COV_KEYS = ("file", "builtin", "matrix")


def load_config(path, command: str, out: str | None = None, seed: int | None = None) -> JobConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    known = {"command", "grid", "covariance", "regulator", "rank_tol", "seed", "n_paths",
             "n_test_functions", "basis", "output"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    cmd = raw.get("command", command)
    if cmd != command:
        raise ConfigError(f"config is for command {cmd!r}, invoked as {command!r}")

    grid = None
    if "grid" in raw:
        try:
            grid = Grid.from_dict(raw["grid"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid grid: {exc}") from None

    cov = raw.get("covariance", {})
    if not isinstance(cov, dict):
        raise ConfigError("covariance must be an object")
    sources = [k for k in _COV_KEYS if k in cov]
    if len(sources) != 1 and not (command in ("verify", "report", "simulate") and not cov and "basis" in raw):
        raise ConfigError(f"exactly one covariance source required (one of {list(_COV_KEYS)}), got {sources}")

    def number(key, default, kind=float, positive=True):
        v = raw.get(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{key} must be a number")
        v = kind(v)
        if kind is float and not np.isfinite(v):
            raise ConfigError(f"{key} must be finite")
        if positive and v <= 0:
            raise ConfigError(f"{key} must be > 0")
        if v < 0:
            raise ConfigError(f"{key} must be >= 0")
        return v

    cfg_seed = number("seed", 0, int, positive=False) if seed is None else int(seed)
    if not 0 <= cfg_seed < 2**64:
        raise ConfigError("seed must fit in an unsigned 64-bit integer")
    regulator = raw.get("regulator")
    if regulator is not None and not isinstance(regulator, str):
        raise ConfigError("regulator must be an expression string")
    basis = raw.get("basis")
    if basis is not None and not isinstance(basis, str):
        raise ConfigError("basis must be a file path")
    output = Path(out) if out is not None else (path.parent / raw.get("output", "."))
    cfg = JobConfig(
        command=command,
        grid=grid,
        covariance=cov,
        base_dir=path.parent,
        regulator=regulator,
        rank_tol=number("rank_tol", RANK_TOL),
        seed=cfg_seed,
        n_paths=number("n_paths", 1000, int, positive=False),
        n_test_functions=number("n_test_functions", 10, int, positive=False),
        basis=basis,
        output=output,
    )
    try:
        cfg.output.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {cfg.output} not writable: {exc.strerror}") from None
    if not os.access(cfg.output, os.W_OK):
        raise ConfigError(f"output directory {cfg.output} not writable")
    return cfg


def _read_matrix(path: Path, n: int) -> np.ndarray:
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        M = np.asarray(data.get("weights", data) if isinstance(data, dict) else data, dtype=float)
    else:
        header, rows = read_csv(path)
        M = np.array([[float(v) for v in header]] + [[float(v) for v in r] for r in rows])
    return M.reshape(n, n)


def build_covariance(cfg: JobConfig) -> CovarianceGridMeasure:
    """Covariance from the configured source; input problems raise ConfigError."""
    cov = cfg.covariance
    try:
        if "file" in cov:
            C = load_covariance(cfg.resolve(cov["file"]))
            if cfg.grid is not None and C.grid != cfg.grid:
                raise ConfigError("covariance file grid differs from the config grid")
            cfg.grid = C.grid
            return C
        if cfg.grid is None:
            raise ConfigError("grid is required for builtin and matrix covariance sources")
        if "matrix" in cov:
            M = _read_matrix(cfg.resolve(cov["matrix"]), cfg.grid.n_nodes)
            return CovarianceGridMeasure(cfg.grid, M)
        kind = cov["builtin"]
        if kind == "white_noise":
            win = cov["window"]
            return white_noise_cov(cfg.grid, (win["lower"], win["upper"]))
        if kind == "orthogonal":
            control = load_measure(cfg.resolve(cov["control"]))
            if control.grid != cfg.grid:
                raise ConfigError("control measure grid differs from the config grid")
            return orthogonal_cov(control)
        if kind == "rank1":
            m = load_measure(cfg.resolve(cov["measure"]))
            if m.grid != cfg.grid:
                raise ConfigError("measure grid differs from the config grid")
            return tensor(m, m)
        raise ConfigError(f"unknown builtin covariance {kind!r}")
    except ConfigError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in covariance input at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid covariance source: {exc}") from None


def regulator_values(cfg: JobConfig) -> np.ndarray | None:
    if cfg.regulator is None:
        return None
    try:
        vals = evaluate_regulator(cfg.regulator, cfg.grid)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not np.all(np.isfinite(vals)) or not np.all(vals > 0):
        raise ConfigError("regulator not strictly positive")
    return vals


def expand(cfg: JobConfig, C: CovarianceGridMeasure) -> KLBasis:
    if not psd_check(C, 1e-6):
        raise NumericalError("precondition violated: covariance not PSD")
    w = build_weight_measure(C.grid)
    reg = regulator_values(cfg)
    if reg is None:
        return kl_expand(C, w, cfg.rank_tol)
    return regulated_expand(C, reg, w, cfg.rank_tol)


def load_or_expand(cfg: JobConfig, C: CovarianceGridMeasure | None) -> KLBasis:
    if cfg.basis is not None:
        try:
            basis = load_basis(cfg.resolve(cfg.basis))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed basis JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid basis file: {exc}") from None
        if cfg.grid is None:
            cfg.grid = basis.grid
        elif basis.grid != cfg.grid:
            raise ConfigError("basis grid differs from the config grid")
        return basis
    if C is None:
        raise ConfigError("need a basis file or a covariance source")
    return expand(cfg, C)


def test_functions(grid: Grid, count: int, seed: int) -> list[np.ndarray]:
    """The constant 1 followed by ``count`` uniform(-1, 1) node vectors."""
    rng = np.random.default_rng(seed)
    return [np.ones(grid.n_nodes)] + [rng.uniform(-1.0, 1.0, grid.n_nodes) for _ in range(count)]


def _spectrum_rows(basis: KLBasis):
    return [(j, float(s), float(np.abs(m).sum())) for j, (s, m) in enumerate(zip(basis.sigma2, basis.mu))]


def cmd_expand(cfg: JobConfig) -> int:
    C = build_covariance(cfg)
    if not np.any(C.weights):
        log.warning("covariance is identically zero; writing an empty basis")
    basis = expand(cfg, C)
    save_basis(cfg.output / "basis.json", basis)
    write_csv(cfg.output / "spectrum.csv", ["j", "sigma2", "tv_mu"], _spectrum_rows(basis))
    log.info("expansion rank %d written to %s", basis.rank, cfg.output)
    return EXIT_OK


def _residual_table(basis: KLBasis, C: CovarianceGridMeasure, funcs):
    tv_c = total_variation(C)
    tv_cols, ms_cols = [], []
    for v in funcs:
        tv_cols.append(tv_residual_curve(basis, C, v))
        ms_cols.append(mean_square_residual_curve(basis, C, v))
    return tv_c, np.array(tv_cols), np.array(ms_cols)


def run_verification(basis: KLBasis, C: CovarianceGridMeasure, funcs) -> tuple[list, list]:
    """Rows of the verify report and the ordered (name, passed, detail) results."""
    results = [(r.name, r.passed, r.detail) for r in check_invariants(basis, C, funcs)]
    tv_c, tv, ms = _residual_table(basis, C, funcs)
    slack = 1e-8
    bound = np.sqrt(np.clip(ms, 0, None)) * np.sqrt(tv_c)
    bound_ok = np.all(tv <= bound + slack * max(1.0, tv_c), axis=0)
    results.append(("tv residual bound", bool(bound_ok.all()), ""))
    sup = np.array([np.max(np.abs(v)) for v in funcs])
    forms = np.array([pair_integrate(C, v) for v in funcs])
    tv_done = bool(np.all(tv[:, -1] <= COMPLETENESS_RTOL * max(tv_c, 1e-300) * sup + 1e-14))
    ms_done = bool(np.all(ms[:, -1] <= COMPLETENESS_RTOL * np.maximum(forms, 1e-300) + 1e-14))
    results.append(("tv residual completeness", tv_done, f"max {tv[:, -1].max():.3e}"))
    results.append(("mean-square completeness", ms_done, f"max {ms[:, -1].max():.3e}"))
    dom = np.all((ms >= -slack) & (forms[:, None] - ms >= -slack), axis=0)
    rows = []
    for n in range(basis.rank + 1):
        rows.append([n, *tv[:, n].tolist(), *ms[:, n].tolist(), "pass" if dom[n] else "fail",
                     "pass" if bound_ok[n] else "fail"])
    return rows, results


def cmd_verify(cfg: JobConfig) -> int:
    C = build_covariance(cfg) if cfg.covariance else None
    basis = load_or_expand(cfg, C)
    if C is None:
        raise ConfigError("verify needs a covariance source")
    funcs = test_functions(basis.grid, cfg.n_test_functions, cfg.seed)
    rows, results = run_verification(basis, C, funcs)
    k = len(funcs)
    header = ["n"] + [f"tv_residual_phi{i}" for i in range(k)] + [f"ms_residual_phi{i}" for i in range(k)]
    header += ["domination", "tv_bound"]
    write_csv(cfg.output / "verify.csv", header, rows)
    write_csv(cfg.output / "invariants.csv", ["invariant", "passed", "gating", "detail"],
              [(n, "pass" if ok else "fail", "no" if n in INFORMATIONAL else "yes", d) for n, ok, d in results])
    for name, ok, detail in results:
        if not ok and name not in INFORMATIONAL:
            print(f"verification failed: {name} {detail}".rstrip(), file=sys.stderr)
            return EXIT_VERIFY
    return EXIT_OK


def cmd_simulate(cfg: JobConfig) -> int:
    C = build_covariance(cfg)
    basis = load_or_expand(cfg, C) if (cfg.basis is not None or cfg.regulator is not None) else None
    rng = RngSpec(cfg.seed)
    X = sample_gaussian_array(C, rng, cfg.n_paths)
    write_paths_csv(cfg.output / "paths.csv", C.grid, X, cfg.seed, RNG_ALGORITHM)
    if basis is not None:
        rows = []
        if cfg.n_paths >= 2 and basis.rank:
            Z = coefficients(basis, X)
            var = Z.var(axis=0, ddof=1)
            corr = np.corrcoef(Z, rowvar=False) if basis.rank > 1 else np.ones((1, 1))
            corr = np.atleast_2d(corr)
            np.fill_diagonal(corr, 0.0)
            for j in range(basis.rank):
                rows.append((j, float(basis.sigma2[j]), float(var[j]), float(np.max(np.abs(corr[j])))))
        write_csv(cfg.output / "coefficients.csv", ["j", "sigma2", "sample_var", "max_abs_offdiag_corr"], rows)
    return EXIT_OK


def cmd_report(cfg: JobConfig) -> int:
    C = build_covariance(cfg)
    basis = load_or_expand(cfg, C)
    funcs = test_functions(basis.grid, cfg.n_test_functions, cfg.seed)
    tv_c, tv, ms = _residual_table(basis, C, funcs)
    k = len(funcs)
    header = ["n", "sigma2_n"] + [f"tv_residual_phi{i}" for i in range(k)] + [f"ms_residual_phi{i}" for i in range(k)]
    header += [f"tv_bound_phi{i}" for i in range(k)]
    bound = np.sqrt(np.clip(ms, 0, None)) * np.sqrt(tv_c)
    rows = []
    for n in range(basis.rank + 1):
        s = float(basis.sigma2[n - 1]) if n else float("nan")
        rows.append([n, s, *tv[:, n].tolist(), *ms[:, n].tolist(), *bound[:, n].tolist()])
    write_csv(cfg.output / "residuals.csv", header, rows)
    write_csv(cfg.output / "spectrum.csv", ["j", "sigma2", "tv_mu"], _spectrum_rows(basis))
    prow = []
    for i, x in enumerate(basis.grid.nodes):
        ind = np.all(basis.grid.nodes <= x, axis=1).astype(float)
        g = process_expansion(basis, x)
        prow.append([*x.tolist(), pair_integrate(C, ind), float(np.sum(basis.sigma2 * g**2))])
    coords = [f"x{k + 1}" for k in range(basis.grid.dim)]
    write_csv(cfg.output / "process_variance.csv", coords + ["var_Z", "var_Z_expansion"], prow)
    return EXIT_OK


HANDLERS = {"expand": cmd_expand, "simulate": cmd_simulate, "verify": cmd_verify, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rmkl", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON job description")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--seed", type=int, help="RNG seed (overrides the config)")
    parser.add_argument("--verbose", action="store_true")
    return parser


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgumentError(message)


def _thread_limit():
    raw = os.environ.get("RMKL_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RMKL_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("RMKL_THREADS must be >= 1")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    parser.__class__ = _Parser
    try:
        args = parser.parse_args(argv)
    except _ArgumentError as exc:
        print(f"rmkl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        cfg = load_config(args.config, args.command, args.out, args.seed)
        limit = _thread_limit()
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=limit):
            return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"rmkl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"rmkl: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
