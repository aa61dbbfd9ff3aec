import numpy as np
import pytest
from scipy import stats

from conftest import random_psd
from rmkl import (
    CovarianceGridMeasure,
    FactorizationError,
    Grid,
    GridMeasure,
    NotPSDError,
    RngSpec,
    SamplePath,
    coefficients,
    empirical_covariance,
    fubini_check,
    kl_expand,
    orthogonal_cov,
    psd_factor_pivoted,
    reconstruct_covariance,
    sample_gaussian,
    sample_gaussian_array,
    tensor,
    total_variation,
    white_noise_cov,
)

N = 10_000
BAND = 5 * np.sqrt(2 / N)


class TestRng:
    def test_bit_identical(self, grid1, rng):
        C = random_psd(grid1, rng)
        a = sample_gaussian_array(C, RngSpec(42), 50)
        b = sample_gaussian_array(C, RngSpec(42), 50)
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, sample_gaussian_array(C, RngSpec(43), 50))

    def test_schedule_independent(self, grid1, rng):
        C = random_psd(grid1, rng)
        whole = sample_gaussian_array(C, RngSpec(9), 30)
        parts = np.vstack([sample_gaussian_array(C, RngSpec(9), 10, start=s) for s in (20, 0, 10)])
        assert np.array_equal(whole, parts[[*range(10, 30), *range(0, 10)]])

    @pytest.mark.parametrize("seed", [-1, 2**64])
    def test_seed_range(self, seed):
        with pytest.raises(ValueError):
            RngSpec(seed)

    def test_unknown_algorithm(self):
        with pytest.raises(ValueError, match="unsupported"):
            RngSpec(1, "mt19937")


class TestSampleGaussian:
    def test_zero_covariance(self, grid1):
        X = sample_gaussian_array(CovarianceGridMeasure.zeros(grid1), RngSpec(0), 5)
        assert X.shape == (5, grid1.n_nodes) and not np.any(X)

    def test_dirac_variance(self, grid1):
        d = GridMeasure.dirac(grid1, [0.7])
        X = sample_gaussian_array(tensor(d, d), RngSpec(1), N)
        a = grid1.nearest_node([0.7])
        assert abs(X[:, a].var(ddof=1) - 1.0) <= BAND
        assert not np.any(np.delete(X, a, axis=1))

    def test_sigma_additivity_exact(self, grid1, rng):
        p = sample_gaussian(random_psd(grid1, rng), RngSpec(3), 1)[0]
        a = np.zeros(grid1.n_nodes, bool)
        b = np.zeros(grid1.n_nodes, bool)
        a[:5], b[10:14] = True, True
        assert p.mass(a | b) == pytest.approx(p.mass(a) + p.mass(b), rel=1e-14, abs=1e-15)
        pieces = [np.arange(grid1.n_nodes) % 4 == k for k in range(4)]
        assert np.isclose(sum(p.mass(m) for m in pieces), p.measure().mass(), rtol=1e-14)

    def test_not_psd(self, grid1):
        W = np.eye(grid1.n_nodes)
        W[0, 0] = -1
        with pytest.raises(NotPSDError):
            sample_gaussian_array(CovarianceGridMeasure(grid1, W), RngSpec(0), 1)

    def test_pivoted_factor_rank_deficient(self, grid1, rng):
        m = GridMeasure(grid1, rng.standard_normal(grid1.n_nodes))
        L = psd_factor_pivoted(tensor(m, m))
        assert L.shape[1] == 1
        assert np.allclose(L @ L.T, np.outer(m.weights, m.weights))

    def test_factorization_failure(self, grid1):
        W = np.zeros((grid1.n_nodes, grid1.n_nodes))
        W[0, 1] = W[1, 0] = 1.0
        with pytest.raises(FactorizationError, match="C not factorizable"):
            psd_factor_pivoted(CovarianceGridMeasure(grid1, W))

    def test_sample_path_validation(self, grid1):
        with pytest.raises(ValueError):
            SamplePath(grid1, np.zeros(3), 0)
        with pytest.raises(ValueError, match="non-finite"):
            SamplePath(grid1, np.full(grid1.n_nodes, np.inf), 0)


class TestBuiltins:
    def test_white_noise_unit_window(self, unit_grid):
        C = white_noise_cov(unit_grid, ([0.0], [1.0]))
        assert abs(total_variation(C) - 1.0) <= 1 / 64
        assert np.count_nonzero(C.weights - np.diag(np.diag(C.weights))) == 0

    def test_white_noise_window_volume(self, grid1):
        C = white_noise_cov(grid1, ([-1.0], [2.0]))
        assert abs(np.trace(C.weights) - 3.0) <= 2 * grid1.spacing[0]

    def test_white_noise_2d(self, grid2):
        C = white_noise_cov(grid2, ([-1.5, -1.5], [1.5, 1.5]))
        assert abs(np.trace(C.weights) - 9.0) <= 4 * 3.0 * max(grid2.spacing)

    def test_white_noise_errors(self, grid1):
        with pytest.raises(ValueError, match="empty window"):
            white_noise_cov(grid1, ([1.0], [1.0]))
        with pytest.raises(ValueError, match="not inside grid box"):
            white_noise_cov(grid1, ([0.0], [9.0]))

    def test_orthogonal(self, grid1):
        d = GridMeasure.dirac(grid1, [1.0])
        assert np.count_nonzero(orthogonal_cov(d).weights) == 1
        assert not np.any(orthogonal_cov(GridMeasure.zeros(grid1)).weights)
        with pytest.raises(ValueError, match="negative control weight"):
            orthogonal_cov(d * -1.0)

    def test_orthogonal_uniform_complete(self, unit_grid):
        C = orthogonal_cov(GridMeasure(unit_grid, np.full(64, 1 / 64)))
        R = reconstruct_covariance(kl_expand(C))
        assert np.max(np.abs(R.weights - C.weights)) <= 1e-6 * total_variation(C)


class TestEmpiricalCovariance:
    def test_identical_paths(self, grid1):
        p = SamplePath(grid1, np.arange(grid1.n_nodes, dtype=float), 0)
        assert not np.any(empirical_covariance([p, p, p]).weights)

    def test_two_paths(self, grid1, rng):
        v = rng.standard_normal(grid1.n_nodes)
        S = empirical_covariance([SamplePath(grid1, v, 0), SamplePath(grid1, -v, 0, 1)])
        assert np.allclose(S.weights, 2 * np.outer(v, v), rtol=1e-14)

    def test_too_few(self, grid1):
        with pytest.raises(ValueError, match="at least 2"):
            empirical_covariance([SamplePath(grid1, np.zeros(grid1.n_nodes), 0)])

    @pytest.mark.slow
    def test_white_noise_sampling_error(self, unit_grid):
        C = white_noise_cov(unit_grid, ([0.0], [1.0]))
        S = empirical_covariance(sample_gaussian(C, RngSpec(11), N))
        assert np.max(np.abs(S.weights - C.weights)) <= 5 * np.max(np.diag(C.weights)) * np.sqrt(2 / N)

    @pytest.mark.slow
    def test_rate(self, grid1, rng):
        C = random_psd(grid1, rng)
        X = sample_gaussian_array(C, RngSpec(5), N)
        errs = []
        for n in (100, N):
            S = np.cov(X[:n], rowvar=False)
            errs.append(np.linalg.norm(S - C.weights))
        assert 5 <= errs[0] / errs[1] <= 20


class TestFubini:
    def test_zero_psi(self, grid1, rng):
        aux = GridMeasure(Grid.regular(1, 0, 1, 16), rng.standard_normal(16))
        r = fubini_check(random_psd(grid1, rng), np.zeros((32, 16)), aux, RngSpec(0), 10)
        assert r.gap == 0.0

    def test_separable(self, grid1, rng):
        aux = GridMeasure(Grid.regular(1, 0, 1, 16), rng.standard_normal(16))
        a, b = rng.standard_normal(32), rng.standard_normal(16)
        C = random_psd(grid1, rng)
        r = fubini_check(C, np.outer(a, b), aux, RngSpec(2), 20)
        paths = sample_gaussian_array(C, RngSpec(2), 20)
        expect = (paths @ a) * (aux.weights @ b)
        assert np.allclose(r.lhs, expect, rtol=1e-12) and np.allclose(r.rhs, expect, rtol=1e-12)

    def test_random_grids(self, rng):
        g = Grid.regular(1, -3, 3, 16)
        aux = GridMeasure(Grid.regular(1, 0, 2, 16), rng.standard_normal(16))
        psi = rng.uniform(-1, 1, (16, 16))
        r = fubini_check(random_psd(g, rng), psi, aux, RngSpec(4), 1000)
        assert r.gap <= 1e-10 * r.scale
        assert r.variance <= 5 * r.scale**2 * np.sqrt(2 / 1000)

    def test_shape_mismatch(self, grid1, rng):
        aux = GridMeasure(Grid.regular(1, 0, 1, 16), np.ones(16))
        with pytest.raises(ValueError, match="psi must have shape"):
            fubini_check(random_psd(grid1, rng), np.zeros((16, 16)), aux, RngSpec(0), 1)


@pytest.mark.slow
def test_coefficient_normality_diagnostic(grid1, rng):
    C = random_psd(grid1, rng)
    b = kl_expand(C)
    Z = coefficients(b, sample_gaussian_array(C, RngSpec(8), N))[:, :5] / np.sqrt(b.sigma2[:5])
    assert np.all(np.abs(stats.skew(Z)) <= 0.1)
    assert np.all(np.abs(stats.kurtosis(Z)) <= 0.2)
