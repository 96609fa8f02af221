import numpy as np
import pytest

from app.core.errors import OrderViolation
from app.services.approx import atomic_approximation, lower_envelope
from app.services.measures import GaussianMeasure, UniformMeasure, convex_order_check, dirac
from tests.helpers import three_atoms


def test_lower_envelope_drops_dominated_lines():
    lines = [(1.0, 0.0), (-1.0, 0.0), (0.0, 5.0)]
    hull = lower_envelope(lines)
    assert hull == [(1.0, 0.0), (-1.0, 0.0)]


def test_lower_envelope_keeps_supporting_line():
    lines = [(1.0, 0.0), (-1.0, 0.0), (0.0, -0.5)]
    assert lower_envelope(lines) == [(1.0, 0.0), (0.0, -0.5), (-1.0, 0.0)]


class TestAtomicApproximation:

    def setup_method(self):
        self.mu = dirac(0.0)
        self.nu = GaussianMeasure(mean=0.0, variance=1.0)
        self.xs = np.linspace(-6.0, 6.0, 1201)

    def test_sandwiched_between_mu_and_nu(self):
        approx = atomic_approximation(self.mu, self.nu, 3.0, 20)
        u_n = approx.measure.potential(self.xs)
        assert np.all(u_n <= self.mu.potential(self.xs) + 1e-9)
        assert np.all(u_n >= self.nu.potential(self.xs) - 1e-9)
        assert approx.measure.mean() == pytest.approx(0.0, abs=1e-9)
        assert convex_order_check(self.mu, approx.measure, self.xs).ordered

    def test_agrees_with_mu_outside_window(self):
        approx = atomic_approximation(self.mu, self.nu, 3.0, 20)
        outside = self.xs[np.abs(self.xs) >= 3.0 + 1e-9]
        np.testing.assert_allclose(approx.measure.potential(outside), self.mu.potential(outside), atol=1e-9)
        lo, hi = approx.window
        assert approx.measure.support()[0] >= lo - 1e-9
        assert approx.measure.support()[1] <= hi + 1e-9

    def test_more_lines_get_closer(self):
        inside = self.xs[np.abs(self.xs) <= 2.0]
        target = self.nu.potential(inside)
        coarse = atomic_approximation(self.mu, self.nu, 3.0, 5).measure.potential(inside)
        fine = atomic_approximation(self.mu, self.nu, 3.0, 40).measure.potential(inside)
        assert np.max(fine - target) < np.max(coarse - target)

    def test_atomic_target_reproduced(self):
        nu = three_atoms()
        approx = atomic_approximation(self.mu, nu, 5.0, 4)
        np.testing.assert_allclose(approx.measure.potential(self.xs), nu.potential(self.xs), atol=1e-12)

    def test_uniform_target(self):
        nu = UniformMeasure(lo=-1.0, hi=1.0)
        approx = atomic_approximation(self.mu, nu, 2.0, 10)
        u_n = approx.measure.potential(self.xs)
        assert np.all(u_n >= nu.potential(self.xs) - 1e-9)
        assert np.all(u_n <= self.mu.potential(self.xs) + 1e-9)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            atomic_approximation(self.mu, self.nu, 0.0, 10)
        with pytest.raises(ValueError):
            atomic_approximation(self.mu, self.nu, 1.0, 1)

    def test_order_violation(self):
        with pytest.raises(OrderViolation):
            atomic_approximation(three_atoms(), dirac(0.0), 2.0, 5)
