import numpy as np
import pytest
from scipy.stats import norm

from app.core.errors import RegressionSingular
from app.services.measures import AtomicMeasure, dirac
from app.services.obstacle_pde import ConstantSigma, Grid, solve_obstacle
from app.services.rfbsde import RfbsdeConfig, skorokhod_condition_check, snell_envelope
from tests.helpers import three_atoms

SIGMA = ConstantSigma(1.0)
QUERIES = [(t, x) for t in (0.1, 0.2, 0.3, 0.5, 0.8) for x in (-0.6, -0.2, 0.2, 0.6)]


@pytest.fixture(scope="module")
def reference():
    grid = Grid.from_n_x(-1.0, 1.0, 0.8, 199, 0.4)
    return solve_obstacle(SIGMA, dirac(0.0), three_atoms(), grid)


class TestSnellEnvelope:

    def test_matches_obstacle_solution(self, reference):
        cfg = RfbsdeConfig(T=0.8, n_steps=200, n_paths=10_000, basis=4, seed=21)
        result = snell_envelope(SIGMA, dirac(0.0), three_atoms(), cfg, QUERIES, max_workers=4)
        expected = np.array([reference.value_at(t, x) for t, x in QUERIES])
        np.testing.assert_allclose(result.values, expected, atol=0.02)
        assert skorokhod_condition_check(result) <= 0.01
        assert np.all(result.stderrs >= 0.0)
        assert result.to_json()["skorokhod"] == skorokhod_condition_check(result)

    def test_bin_regression(self, reference):
        cfg = RfbsdeConfig(T=0.5, n_steps=100, n_paths=10_000, regression="bins", n_bins=20, seed=22)
        points = [(0.3, 0.2), (0.5, -0.6)]
        result = snell_envelope(SIGMA, dirac(0.0), three_atoms(), cfg, points, max_workers=1)
        expected = np.array([reference.value_at(t, x) for t, x in points])
        np.testing.assert_allclose(result.values, expected, atol=0.03)

    def test_value_above_obstacle(self):
        cfg = RfbsdeConfig(T=0.5, n_steps=50, n_paths=2_000, seed=23)
        result = snell_envelope(SIGMA, dirac(0.0), three_atoms(), cfg, [(0.5, 0.0), (0.5, 0.9)])
        h = three_atoms().potential(np.array([0.0, 0.9]))
        assert np.all(result.values >= h - 1e-12)
        assert all(e.min_gap >= -1e-12 for e in result.estimates)

    def test_time_zero_is_initial_value(self):
        cfg = RfbsdeConfig(T=1.0, n_steps=10, n_paths=100)
        result = snell_envelope(SIGMA, dirac(0.0), three_atoms(), cfg, [(0.0, 0.3)])
        estimate = result.estimates[0]
        assert estimate.value == pytest.approx(-0.3)
        assert estimate.stderr == 0.0
        assert estimate.n_steps == 0

    def test_query_beyond_horizon(self):
        cfg = RfbsdeConfig(T=0.5, n_steps=10, n_paths=100)
        with pytest.raises(ValueError):
            snell_envelope(SIGMA, dirac(0.0), three_atoms(), cfg, [(0.6, 0.0)])

    def test_obstacle_above_terminal_value(self):
        cfg = RfbsdeConfig(T=0.5, n_steps=10, n_paths=100)
        with pytest.raises(ValueError):
            snell_envelope(SIGMA, three_atoms(), dirac(0.0), cfg, [(0.5, 0.0)], max_workers=1)

    def test_callable_and_invalid_inputs(self):
        cfg = RfbsdeConfig(T=0.5, n_steps=10, n_paths=500, seed=24)
        result = snell_envelope(SIGMA, lambda x: -np.abs(x), lambda x: -np.abs(x), cfg, [(0.5, 0.4)])
        assert result.values[0] == pytest.approx(-0.4, abs=1e-12)
        with pytest.raises(TypeError):
            snell_envelope(SIGMA, 5.0, three_atoms(), cfg, [(0.5, 0.0)])

    def test_degenerate_regression(self):
        cfg = RfbsdeConfig(T=0.5, n_steps=10, n_paths=100)
        with pytest.raises(RegressionSingular):
            snell_envelope(ConstantSigma(0.0), dirac(0.0), three_atoms(), cfg, [(0.5, 0.0)], max_workers=1)

    def test_without_obstacle_matches_heat_equation(self):
        # -E|x + sqrt(t) Z|
        def heat(t, x):
            s = np.sqrt(t)
            return -(s * np.sqrt(2.0 / np.pi) * np.exp(-x ** 2 / (2.0 * t)) + x * (1.0 - 2.0 * norm.cdf(-x / s)))

        cfg = RfbsdeConfig(T=1.0, n_steps=50, n_paths=10_000, seed=25)
        points = [(1.0, 0.0), (0.5, 0.3)]
        result = snell_envelope(SIGMA, dirac(0.0), lambda x: np.full_like(x, -1e6), cfg, points, max_workers=2)
        expected = np.array([heat(t, x) for t, x in points])
        np.testing.assert_allclose(result.values, expected, atol=0.03)
        assert skorokhod_condition_check(result) == 0.0

    def test_monotone_in_obstacle(self):
        lower = three_atoms()
        upper = AtomicMeasure(atoms=[(-0.5, 0.25), (0.0, 0.5), (0.5, 0.25)])
        xs = np.linspace(-1.5, 1.5, 61)
        assert np.all(upper.potential(xs) >= lower.potential(xs))

        cfg = RfbsdeConfig(T=0.8, n_steps=100, n_paths=10_000, seed=26)
        points = [(0.2, 0.0), (0.5, 0.3), (0.8, -0.6), (0.8, 0.0)]
        low = snell_envelope(SIGMA, dirac(0.0), lower, cfg, points, max_workers=2)
        high = snell_envelope(SIGMA, dirac(0.0), upper, cfg, points, max_workers=2)
        assert np.all(low.values <= high.values + 0.02)
