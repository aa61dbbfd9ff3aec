import json
import logging
import subprocess
import sys

import numpy as np
import pytest

from rmkl import CovarianceGridMeasure, Grid, GridMeasure
from rmkl.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_VERIFY, main
from rmkl.io import load_basis, read_csv, read_paths_csv, save_covariance, save_measure

GRID = {"lower": [-5.0], "upper": [5.0], "nodes_per_axis": [40]}
WHITE = {"builtin": "white_noise", "window": {"lower": [0.0], "upper": [1.0]}}


def job(tmp_path, name="job.json", **cfg):
    cfg.setdefault("grid", GRID)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run(cmd, cfg, out, *extra):
    return main([cmd, "--config", cfg, "--out", str(out), *extra])


def rows(path):
    header, body = read_csv(path)
    return header, [[float(v) if v not in ("pass", "fail", "yes", "no", "") else v for v in r] for r in body]


class TestExpand:
    def test_white_noise(self, tmp_path):
        assert run("expand", job(tmp_path, covariance=WHITE), tmp_path / "o") == EXIT_OK
        b = load_basis(tmp_path / "o" / "basis.json")
        header, body = rows(tmp_path / "o" / "spectrum.csv")
        assert header == ["j", "sigma2", "tv_mu"]
        assert len(body) == b.rank > 0
        assert [r[1] for r in body] == list(b.sigma2)

    def test_rank1_measure_file(self, tmp_path):
        g = Grid.from_dict(GRID)
        save_measure(tmp_path / "m.json", GridMeasure(g, np.exp(-g.nodes[:, 0] ** 2)))
        cfg = job(tmp_path, covariance={"builtin": "rank1", "measure": "m.json"})
        assert run("expand", cfg, tmp_path / "o") == EXIT_OK
        assert load_basis(tmp_path / "o" / "basis.json").rank == 1

    def test_zero_covariance_file(self, tmp_path, caplog):
        save_covariance(tmp_path / "c.json", CovarianceGridMeasure.zeros(Grid.from_dict(GRID)))
        cfg = job(tmp_path, covariance={"file": "c.json"})
        with caplog.at_level(logging.WARNING):
            assert run("expand", cfg, tmp_path / "o") == EXIT_OK
        assert load_basis(tmp_path / "o" / "basis.json").rank == 0
        assert "identically zero" in caplog.text

    def test_matrix_csv_and_regulator(self, tmp_path, rng):
        n = 40
        G = rng.standard_normal((n, 2 * n))
        M = G @ G.T / (2 * n)
        M = 0.5 * (M + M.T)
        (tmp_path / "c.csv").write_text("\n".join(",".join(repr(float(v)) for v in r) for r in M))
        cfg = job(tmp_path, covariance={"matrix": "c.csv"}, regulator="1 + x^2", rank_tol=1e-14)
        assert run("expand", cfg, tmp_path / "o") == EXIT_OK
        b = load_basis(tmp_path / "o" / "basis.json")
        R = (b.mu.T * b.sigma2) @ b.mu
        assert np.max(np.abs(R - M)) <= 1e-6 * np.max(np.abs(M))

    def test_2d_orthogonal(self, tmp_path):
        grid = {"lower": [-2.0, -2.0], "upper": [2.0, 2.0], "nodes_per_axis": [6, 6]}
        g = Grid.from_dict(grid)
        save_measure(tmp_path / "ctl.json", GridMeasure(g, np.full(36, 0.1)))
        cfg = job(tmp_path, grid=grid, covariance={"builtin": "orthogonal", "control": "ctl.json"}, regulator="p")
        assert run("expand", cfg, tmp_path / "o") == EXIT_OK
        assert load_basis(tmp_path / "o" / "basis.json").rank == 36


class TestErrors:
    def test_malformed_json(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text('{"grid": {\n  "lower": [0,\n}')
        assert main(["expand", "--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG
        assert "line 3 column" in capsys.readouterr().err

    @pytest.mark.parametrize(
        "cfg",
        [
            {"covariance": WHITE, "colour": 1},
            {"covariance": {**WHITE, "file": "c.json"}},
            {"covariance": {}},
            {"covariance": {"file": "missing.json"}},
            {"covariance": WHITE, "rank_tol": -1},
            {"covariance": WHITE, "rank_tol": "small"},
            {"covariance": WHITE, "regulator": "x1 / 0"},
            {"covariance": WHITE, "regulator": "x - 10"},
            {"covariance": WHITE, "grid": {"lower": [1.0], "upper": [0.0], "nodes_per_axis": [4]}},
            {"covariance": {"builtin": "white_noise", "window": {"lower": [0.0], "upper": [9.0]}}},
            {"covariance": {"builtin": "brownian"}},
            {"covariance": WHITE, "command": "simulate"},
            {"covariance": WHITE, "seed": -3},
        ],
    )
    def test_config_errors(self, tmp_path, cfg):
        assert run("expand", job(tmp_path, **cfg), tmp_path / "o") == EXIT_CONFIG

    def test_missing_config_flag(self, capsys):
        assert main(["expand"]) == EXIT_CONFIG

    def test_unknown_command(self, tmp_path):
        assert main(["explode", "--config", job(tmp_path, covariance=WHITE)]) == EXIT_CONFIG

    def test_config_not_found(self, tmp_path):
        assert main(["expand", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG

    def test_not_psd_is_numerical(self, tmp_path, capsys):
        M = np.eye(40)
        M[3, 3] = -1.0
        (tmp_path / "c.csv").write_text("\n".join(",".join(repr(float(v)) for v in r) for r in M))
        cfg = job(tmp_path, covariance={"matrix": "c.csv"})
        assert run("expand", cfg, tmp_path / "o") == EXIT_NUMERIC
        assert "not PSD" in capsys.readouterr().err
        assert run("simulate", cfg, tmp_path / "o") == EXIT_NUMERIC

    def test_threads_env(self, tmp_path, monkeypatch):
        cfg = job(tmp_path, covariance=WHITE)
        monkeypatch.setenv("RMKL_THREADS", "1")
        assert run("expand", cfg, tmp_path / "o") == EXIT_OK
        monkeypatch.setenv("RMKL_THREADS", "many")
        assert run("expand", cfg, tmp_path / "o") == EXIT_CONFIG
        monkeypatch.setenv("RMKL_THREADS", "0")
        assert run("expand", cfg, tmp_path / "o") == EXIT_CONFIG


class TestVerify:
    def test_rank1_passes(self, tmp_path):
        g = Grid.from_dict(GRID)
        save_measure(tmp_path / "m.json", GridMeasure(g, np.exp(-g.nodes[:, 0] ** 2)))
        cfg = job(tmp_path, covariance={"builtin": "rank1", "measure": "m.json"}, n_test_functions=4)
        assert run("verify", cfg, tmp_path / "o") == EXIT_OK
        header, body = rows(tmp_path / "o" / "verify.csv")
        assert [r[0] for r in body] == [0.0, 1.0]
        assert header[-2:] == ["domination", "tv_bound"]
        final = body[-1]
        assert all(v <= 1e-6 for v in final[1:-2])

    def test_report_shape(self, tmp_path):
        cfg = job(tmp_path, covariance=WHITE, n_test_functions=5)
        assert run("verify", cfg, tmp_path / "o") == EXIT_OK
        header, body = rows(tmp_path / "o" / "verify.csv")
        n = np.array([r[0] for r in body])
        assert np.all(np.diff(n) == 1)
        ms_cols = [i for i, h in enumerate(header) if h.startswith("ms_residual")]
        ms = np.array([[r[i] for i in ms_cols] for r in body])
        assert np.all(np.diff(ms, axis=0) <= 1e-10)
        assert all(r[-1] == "pass" and r[-2] == "pass" for r in body)

    def test_ascending_basis_fails(self, tmp_path, capsys):
        cfg = job(tmp_path, covariance=WHITE)
        assert run("expand", cfg, tmp_path / "b") == EXIT_OK
        doc = json.loads((tmp_path / "b" / "basis.json").read_text())
        doc["terms"] = doc["terms"][::-1]
        (tmp_path / "bad.json").write_text(json.dumps(doc))
        cfg = job(tmp_path, "v.json", covariance=WHITE, basis="bad.json")
        assert run("verify", cfg, tmp_path / "o") == EXIT_VERIFY
        assert "eigenvalues descending" in capsys.readouterr().err

    def test_incomplete_basis_fails(self, tmp_path, capsys):
        cfg = job(tmp_path, covariance=WHITE)
        assert run("expand", cfg, tmp_path / "b") == EXIT_OK
        doc = json.loads((tmp_path / "b" / "basis.json").read_text())
        doc["terms"] = doc["terms"][:2]
        (tmp_path / "short.json").write_text(json.dumps(doc))
        cfg = job(tmp_path, "v.json", covariance=WHITE, basis="short.json")
        assert run("verify", cfg, tmp_path / "o") == EXIT_VERIFY
        assert "completeness" in capsys.readouterr().err

    def test_basis_grid_mismatch(self, tmp_path):
        cfg = job(tmp_path, covariance=WHITE)
        assert run("expand", cfg, tmp_path / "b") == EXIT_OK
        other = {"lower": [-5.0], "upper": [5.0], "nodes_per_axis": [20]}
        cfg = job(tmp_path, "v.json", grid=other, covariance=WHITE, basis="b/basis.json")
        assert run("verify", cfg, tmp_path / "o") == EXIT_CONFIG


class TestSimulate:
    def test_deterministic(self, tmp_path):
        cfg = job(tmp_path, covariance=WHITE, n_paths=50, seed=3, regulator="1 + x^2")
        for out in ("a", "b"):
            assert run("simulate", cfg, tmp_path / out) == EXIT_OK
        for f in ("paths.csv", "paths.seed.json", "coefficients.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_seed_flag_overrides(self, tmp_path):
        cfg = job(tmp_path, covariance=WHITE, n_paths=5, seed=3)
        run("simulate", cfg, tmp_path / "a")
        run("simulate", cfg, tmp_path / "b", "--seed", "4")
        assert (tmp_path / "a" / "paths.csv").read_bytes() != (tmp_path / "b" / "paths.csv").read_bytes()
        assert json.loads((tmp_path / "b" / "paths.seed.json").read_text())["seed"] == 4

    def test_zero_count(self, tmp_path):
        cfg = job(tmp_path, covariance=WHITE, n_paths=0)
        assert run("simulate", cfg, tmp_path / "o") == EXIT_OK
        assert (tmp_path / "o" / "paths.csv").read_text().count("\n") == 1

    @pytest.mark.slow
    def test_white_noise_window_variance(self, tmp_path):
        cfg = job(tmp_path, covariance=WHITE, n_paths=10_000, seed=12)
        assert run("simulate", cfg, tmp_path / "o") == EXIT_OK
        X = read_paths_csv(tmp_path / "o" / "paths.csv", Grid.from_dict(GRID))
        x = Grid.from_dict(GRID).nodes[:, 0]
        m = X[:, (x >= 0) & (x <= 1)].sum(axis=1)
        window = np.sum((x >= 0) & (x <= 1)) * 0.25
        assert abs(m.var(ddof=1) / window - 1.0) <= 5 * np.sqrt(2 / 10_000)

    def test_coefficient_stats(self, tmp_path):
        cfg = job(tmp_path, covariance=WHITE, n_paths=2000, seed=1)
        assert run("expand", cfg, tmp_path / "b") == EXIT_OK
        cfg = job(tmp_path, "s.json", covariance=WHITE, n_paths=2000, seed=1, basis="b/basis.json")
        assert run("simulate", cfg, tmp_path / "o") == EXIT_OK
        header, body = rows(tmp_path / "o" / "coefficients.csv")
        assert header == ["j", "sigma2", "sample_var", "max_abs_offdiag_corr"]
        for r in body[:3]:
            assert abs(r[2] / r[1] - 1) <= 5 * np.sqrt(2 / 2000)


class TestReport:
    def test_files(self, tmp_path):
        cfg = job(tmp_path, covariance=WHITE, n_test_functions=2)
        assert run("report", cfg, tmp_path / "o") == EXIT_OK
        header, body = rows(tmp_path / "o" / "residuals.csv")
        assert header[:2] == ["n", "sigma2_n"] and len(header) == 2 + 3 * 3
        for r in body:
            for k in range(3):
                assert r[2 + k] <= r[8 + k] + 1e-8
        h, pv = rows(tmp_path / "o" / "process_variance.csv")
        assert h == ["x1", "var_Z", "var_Z_expansion"]
        assert all(abs(r[1] - r[2]) <= 1e-6 for r in pv)


@pytest.mark.parametrize("seed", range(20))
def test_outputs_reparse(tmp_path, seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(4, 16))
    grid = {"lower": [float(r.uniform(-4, -1))], "upper": [float(r.uniform(1, 4))], "nodes_per_axis": [n]}
    g = Grid.from_dict(grid)
    G = r.standard_normal((n, int(r.integers(1, n + 1))))
    M = G @ G.T
    save_covariance(tmp_path / "c.json", CovarianceGridMeasure(g, M))
    cfg = job(tmp_path, grid=grid, covariance={"file": "c.json"}, n_paths=int(r.integers(0, 5)), seed=seed)
    for cmd in ("expand", "simulate"):
        assert run(cmd, cfg, tmp_path / "o") == EXIT_OK
    b = load_basis(tmp_path / "o" / "basis.json")
    again = tmp_path / "again.json"
    again.write_text(json.dumps(b.to_dict(), indent=1) + "\n")
    assert again.read_bytes() == (tmp_path / "o" / "basis.json").read_bytes()
    X = read_paths_csv(tmp_path / "o" / "paths.csv", g)
    assert X.shape[1] == n


def test_module_entry_point(tmp_path):
    cfg = job(tmp_path, covariance=WHITE)
    proc = subprocess.run([sys.executable, "-m", "rmkl", "expand", "--config", cfg, "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
