import math

import numpy as np
import pytest

import bsdelab as bl
from bsdelab.errors import ResourceLimit


def uniform_grid(n):
    return bl.TimeGrid(points=np.linspace(0.0, 1.0, n), cap_index=n - 2)


class TestSimulatePaths:
    def test_reproducible_same_seed(self):
        grid = uniform_grid(2)
        a = bl.simulate_paths(grid, 1, 1, seed=99)
        b = bl.simulate_paths(grid, 1, 1, seed=99)
        assert np.array_equal(a.increments, b.increments)
        assert a.increments.shape == (1, 1, 1)

    @pytest.mark.parametrize("workers", [4, 8])
    def test_worker_count_invariance(self, workers):
        grid = uniform_grid(11)
        base = bl.simulate_paths(grid, 2, 1000, seed=7, workers=1)
        other = bl.simulate_paths(grid, 2, 1000, seed=7, workers=workers)
        assert np.array_equal(base.increments, other.increments)
        assert np.array_equal(base.levels, other.levels)

    def test_terminal_moments(self):
        grid = uniform_grid(2)
        m = 100_000
        bundle = bl.simulate_paths(grid, 1, m, seed=5)
        w_t = bundle.terminal_levels()
        assert abs(w_t.mean()) < 4.0 / math.sqrt(m)
        assert abs(w_t.var() - 1.0) < 0.05

    def test_brownian_covariance(self):
        grid = uniform_grid(11)
        m = 100_000
        bundle = bl.simulate_paths(grid, 1, m, seed=21)
        w_half = bundle.levels[:, 5, 0]
        w_one = bundle.levels[:, 10, 0]
        cov = float(np.mean(w_half * w_one))
        # Var(W_.5 W_1) = E[W_.5^2 W_1^2] - .25 = 1.25 for this pair
        se = math.sqrt(1.25 / m)
        assert abs(cov - 0.5) < 4.0 * se

    def test_levels_are_prefix_sums(self):
        grid = uniform_grid(6)
        bundle = bl.simulate_paths(grid, 2, 50, seed=3)
        assert np.all(bundle.levels[:, 0, :] == 0.0)
        # the stepwise identity holds up to one rounding per addition
        rebuilt = bundle.levels[:, 1:, :] - bundle.levels[:, :-1, :]
        assert np.allclose(rebuilt, bundle.increments, rtol=1e-13, atol=1e-14)

    def test_memory_cap(self):
        grid = uniform_grid(101)
        with pytest.raises(ResourceLimit):
            bl.simulate_paths(grid, 1, 10_000, seed=1, memory_cap=1000)


class TestStochasticIntegral:
    def test_zero_integrand(self):
        bundle = bl.simulate_paths(uniform_grid(6), 1, 40, seed=2)
        out = bl.stochastic_integral(bundle, np.zeros(5))
        assert np.all(out == 0.0)

    def test_unit_integrand_telescopes(self):
        bundle = bl.simulate_paths(uniform_grid(8), 1, 40, seed=2)
        out = bl.stochastic_integral(bundle, np.ones(7))
        assert np.allclose(out, bundle.levels[:, -1, 0], rtol=0, atol=1e-15)

    def test_ito_isometry_with_damped_integrand(self):
        model = bl.IntensityModel.power_gap(1.0, 1.0)
        grid = bl.make_grid(model, 21, mass_cap=8.0)
        m = 100_000
        bundle = bl.simulate_paths(grid, 1, m, seed=13)
        beta = np.asarray(model.exp_minus_cumulative(grid.points[:-1]))
        out = bl.stochastic_integral(bundle, beta)
        predicted = float(np.sum(beta ** 2 * grid.gaps))
        sample_var = float(out.var())
        assert abs(sample_var - predicted) < 0.05 * predicted

    def test_shape_mismatch(self):
        bundle = bl.simulate_paths(uniform_grid(6), 1, 10, seed=2)
        with pytest.raises(ValueError):
            bl.stochastic_integral(bundle, np.ones(9))


class TestBinaryDump:
    def test_roundtrip(self, tmp_path):
        grid = uniform_grid(9)
        bundle = bl.simulate_paths(grid, 2, 17, seed=1234)
        path = tmp_path / "bundle.bin"
        bl.dump_bundle(bundle, path)
        loaded = bl.load_bundle(path, grid)
        assert loaded.seed == bundle.seed
        assert loaded.n_paths == bundle.n_paths
        assert loaded.dim == bundle.dim
        assert np.array_equal(loaded.increments, bundle.increments)
        assert np.array_equal(loaded.levels, bundle.levels)

    def test_wire_layout_is_header_then_increments(self, tmp_path):
        import struct
        grid = uniform_grid(4)
        bundle = bl.simulate_paths(grid, 1, 2, seed=9)
        path = tmp_path / "bundle.bin"
        bl.dump_bundle(bundle, path)
        raw = path.read_bytes()
        seed, m, n, d = struct.unpack("<qqqq", raw[:32])
        assert (seed, m, n, d) == (9, 2, 4, 1)
        body = np.frombuffer(raw[32:], dtype="<f8").reshape(2, 3, 1)
        assert np.array_equal(body, bundle.increments)


class TestMultidimensional:
    def test_per_coordinate_integrand(self):
        grid = uniform_grid(6)
        bundle = bl.simulate_paths(grid, 2, 100, seed=19)
        beta = np.zeros((5, 2))
        beta[:, 0] = 1.0       # integrate only the first coordinate
        out = bl.stochastic_integral(bundle, beta)
        assert np.allclose(out, bundle.levels[:, -1, 0], atol=1e-15)

    def test_coordinates_are_independent(self):
        grid = uniform_grid(2)
        bundle = bl.simulate_paths(grid, 2, 100_000, seed=29)
        w = bundle.terminal_levels()
        corr = float(np.corrcoef(w[:, 0], w[:, 1])[0, 1])
        assert abs(corr) < 4.0 / np.sqrt(100_000)
