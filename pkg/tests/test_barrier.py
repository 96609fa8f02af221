import warnings

import numpy as np
import pytest

from app.core.errors import GridMismatch
from app.services.barrier import (BarrierLookup, RootBarrier, barrier_distance, combine, extract_barrier,
                                  hit_time, regularize)
from app.services.embed_mc import SdeConfig, simulate_embedding
from app.services.measures import AtomicMeasure, contact_set, dirac
from app.services.obstacle_pde import ConstantSigma, Grid, solve_heat, solve_obstacle
from tests.helpers import three_atoms


class TestRootBarrier:

    def test_endpoints_forced_to_zero(self):
        b = RootBarrier(xs=[0.0, 1.0, 2.0], f=[5.0, 1.0, np.inf])
        assert b.f.tolist() == [0.0, 1.0, 0.0]
        assert len(b) == 3

    def test_invalid_values(self):
        with pytest.raises(ValueError):
            RootBarrier(xs=[0.0, 1.0, 2.0], f=[0.0, -1.0, 0.0])
        with pytest.raises(ValueError):
            RootBarrier(xs=[0.0, 1.0, 2.0], f=[0.0, np.nan, 0.0])
        with pytest.raises(ValueError):
            RootBarrier(xs=[0.0, 2.0, 1.0], f=[0.0, 1.0, 0.0])
        with pytest.raises(ValueError):
            RootBarrier(xs=[0.0, 1.0], f=[0.0])

    def test_csv_round_trip(self, tmp_path):
        b = RootBarrier(xs=np.linspace(-1.0, 1.0, 5), f=[0.0, np.inf, 0.3931, np.inf, 0.0])
        text = b.to_csv()
        assert text.splitlines()[0] == "x,f"
        assert "inf" in text
        path = tmp_path / "barrier.csv"
        path.write_text(text, encoding="utf-8")
        loaded = RootBarrier.read_csv(str(path))
        np.testing.assert_array_equal(loaded.xs, b.xs)
        np.testing.assert_array_equal(loaded.f, b.f)

    def test_read_csv_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,g\n0,0\n1,0\n", encoding="utf-8")
        with pytest.raises(ValueError):
            RootBarrier.read_csv(str(path))

    def test_lookup_modes(self):
        b = RootBarrier(xs=[0.0, 1.0, 2.0, 3.0], f=[0.0, 1.0, 3.0, 0.0])
        assert b.column_values(1.5, "nearest") == 1.0
        assert b.column_values(1.5, "linear") == pytest.approx(2.0)
        assert b.column_values(1.5, "conservative") == 1.0
        assert b.column_values(2.0, "conservative") == 3.0
        assert b.column_values(-5.0).item() == 0.0
        with pytest.raises(ValueError):
            b.column_values(1.0, "cubic")

    def test_linear_lookup_with_infinite_column(self):
        b = RootBarrier(xs=[0.0, 1.0, 2.0], f=[0.0, np.inf, 0.0])
        assert b.column_values(0.0, "linear") == 0.0
        assert np.isinf(b.column_values(0.5, "linear"))

    def test_membership(self):
        b = RootBarrier(xs=[-1.0, 0.0, 1.0], f=[0.0, 0.5, 0.0])
        assert b.is_member(0.6, 0.0)
        assert not b.is_member(0.4, 0.0)
        np.testing.assert_array_equal(b.is_member(0.4, np.array([-1.0, 0.0])), [True, False])


class TestBarrierLookup:

    def setup_method(self):
        self.barrier = RootBarrier(xs=np.linspace(-1.0, 1.0, 5), f=[0.0, np.inf, 0.2, np.inf, 0.0])

    def test_crossing_catches_skipped_column(self):
        lookup = BarrierLookup(self.barrier, "crossing")
        stopped, where = lookup.stop_check(0.5, np.array([-0.4]), np.array([0.4]))
        assert stopped[0]
        assert where[0] == 0.0

    def test_nearest_misses_skipped_column(self):
        lookup = BarrierLookup(self.barrier, "nearest")
        stopped, _ = lookup.stop_check(0.5, np.array([-0.4]), np.array([0.4]))
        assert not stopped[0]

    def test_exit_through_endpoint(self):
        lookup = BarrierLookup(self.barrier, "crossing")
        stopped, where = lookup.stop_check(0.01, np.array([0.9]), np.array([1.3]))
        assert stopped[0]
        assert where[0] == 1.0

    def test_crossing_respects_time(self):
        lookup = BarrierLookup(self.barrier, "crossing")
        stopped, _ = lookup.stop_check(0.1, np.array([-0.4]), np.array([0.4]))
        assert not stopped[0]


class TestExtraction:

    def test_three_atom_barrier_shape(self, three_atom_barrier):
        f = three_atom_barrier.f
        mid = len(f) // 2
        assert np.all(np.isinf(np.delete(f, [0, mid, len(f) - 1])))
        assert three_atom_barrier.provenance == "from_pde"

    def test_only_obstacle_solutions(self):
        grid = Grid.from_n_x(-2.0, 2.0, 0.5, 19, 0.4)
        with pytest.raises(ValueError):
            extract_barrier(solve_heat(ConstantSigma(1.0), dirac(0.0), grid), three_atoms())

    def test_stable_when_tolerance_halved(self):
        grid = Grid.from_n_x(-1.0, 1.0, 0.6, 39, 0.4)
        sol = solve_obstacle(ConstantSigma(1.0), dirac(0.0), three_atoms(), grid)
        for tol in (1e-6, 1e-8):
            coarse = extract_barrier(sol, three_atoms(), tol=tol).f
            fine = extract_barrier(sol, three_atoms(), tol=tol / 2).f
            np.testing.assert_array_equal(np.isinf(coarse), np.isinf(fine))
            finite = np.isfinite(coarse)
            assert np.all(np.abs(coarse[finite] - fine[finite]) <= grid.dt)
            assert np.all(fine[finite] >= coarse[finite])

    def test_regularize(self, three_atom_barrier, three_atom_grid):
        contact = contact_set(dirac(0.0), three_atoms(), three_atom_grid.xs)
        again = regularize(three_atom_barrier, contact)
        np.testing.assert_array_equal(again.f, three_atom_barrier.f)
        assert regularize(three_atom_barrier, []) is three_atom_barrier

    def test_regularize_off_grid(self):
        b = RootBarrier(xs=np.linspace(-1.0, 1.0, 5), f=[0.0, 1.0, 1.0, 1.0, 0.0])
        with pytest.raises(ValueError):
            regularize(b, [0.3])


class TestCombine:

    def setup_method(self):
        xs = np.linspace(-1.0, 1.0, 5)
        self.b1 = RootBarrier(xs=xs, f=[0.0, 1.0, np.inf, 0.5, 0.0], provenance="from_pde")
        self.b2 = RootBarrier(xs=xs, f=[0.0, 2.0, 0.3, np.inf, 0.0], provenance="from_pde")

    def test_union_and_intersection(self):
        union = combine(self.b1, self.b2, "union")
        inter = combine(self.b1, self.b2, "intersection")
        assert union.f.tolist() == [0.0, 1.0, 0.3, 0.5, 0.0]
        assert inter.f.tolist() == [0.0, 2.0, np.inf, np.inf, 0.0]
        assert union.provenance == "from_pde"

    def test_algebra(self):
        for mode in ("union", "intersection"):
            np.testing.assert_array_equal(combine(self.b1, self.b2, mode).f, combine(self.b2, self.b1, mode).f)
            np.testing.assert_array_equal(combine(self.b1, self.b1, mode).f, self.b1.f)

    def test_grid_mismatch(self):
        other = RootBarrier(xs=np.linspace(-1.0, 1.0, 6), f=np.zeros(6))
        with pytest.raises(GridMismatch):
            combine(self.b1, other, "union")
        with pytest.raises(ValueError):
            combine(self.b1, self.b2, "xor")

    def test_distance(self):
        assert barrier_distance(self.b1, self.b1) == 0.0
        assert barrier_distance(self.b1, self.b2) > 0.0
        assert barrier_distance(self.b1, self.b2) == pytest.approx(barrier_distance(self.b2, self.b1))


class TestBarrierDistance:
    """压缩坐标下的 Hausdorff 距离，随机障碍取自 [-1, 1] 上的 21 列"""

    def setup_method(self):
        self.rng = np.random.default_rng(44)
        self.xs = np.linspace(-1.0, 1.0, 21)

    def random_barrier(self, xs=None) -> RootBarrier:
        xs = self.xs if xs is None else xs
        f = np.where(self.rng.random(len(xs)) < 0.3, np.inf, self.rng.uniform(0.0, 3.0, len(xs)))
        return RootBarrier(xs=xs, f=f)

    def test_pseudo_metric(self):
        for _ in range(100):
            b1, b2, b3 = self.random_barrier(), self.random_barrier(), self.random_barrier()
            d12, d23, d13 = barrier_distance(b1, b2), barrier_distance(b2, b3), barrier_distance(b1, b3)
            assert d12 == barrier_distance(b2, b1)
            assert d13 <= d12 + d23 + 1e-12
            assert barrier_distance(b1, b1) == 0.0

    def test_bounded_by_compact_diameter(self):
        for _ in range(100):
            other_xs = np.sort(self.rng.uniform(-1.0, 1.0, 15))
            d = barrier_distance(self.random_barrier(), self.random_barrier(other_xs))
            assert 0.0 <= d <= np.sqrt(2.0)

        zero = RootBarrier(xs=self.xs, f=np.zeros(len(self.xs)))
        f = np.zeros(len(self.xs))
        f[10] = np.inf
        d = barrier_distance(zero, RootBarrier(xs=self.xs, f=f))
        assert 0.0 < d <= np.sqrt(2.0)

    def test_infinite_columns_do_not_warn(self):
        f = np.zeros(len(self.xs))
        f[3:8] = np.inf
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert barrier_distance(RootBarrier(xs=self.xs, f=f), self.random_barrier()) >= 0.0

    def test_shrinks_under_refinement(self):
        def three_atom(n_x: int) -> RootBarrier:
            grid = Grid.from_n_x(-1.0, 1.0, 0.6, n_x, 0.4)
            sol = solve_obstacle(ConstantSigma(1.0), dirac(0.0), three_atoms(), grid, store="stream")
            return extract_barrier(sol, three_atoms())

        reference = three_atom(159)
        distances = [barrier_distance(three_atom(n_x), reference) for n_x in (19, 39, 79)]
        assert distances[0] > distances[1] > distances[2]

    def test_membership_monotone_in_time(self):
        for _ in range(100):
            b = self.random_barrier()
            x = self.rng.uniform(-1.2, 1.2, 50)
            t = self.rng.uniform(0.0, 3.0, 50)
            later = t + self.rng.uniform(0.0, 1.0, 50)
            for lookup in ("nearest", "linear", "conservative"):
                inside = b.is_member(t, x, lookup)
                assert np.all(b.is_member(later, x, lookup)[inside])


class TestHitTime:

    def test_first_entry(self):
        b = RootBarrier(xs=[-1.0, 0.0, 1.0], f=[0.0, 0.5, 0.0])
        assert hit_time(b, [(0.0, 0.0), (0.3, 0.1), (0.6, 0.0)]) == 0.6
        assert hit_time(b, [(0.0, 0.0), (0.3, 0.1)]) is None
        assert hit_time(b, []) is None
        with pytest.raises(ValueError):
            hit_time(b, [(0.5, 0.0), (0.3, 0.0)])

    def test_crossing(self):
        b = RootBarrier(xs=np.linspace(-1.0, 1.0, 5), f=[0.0, np.inf, 0.2, np.inf, 0.0])
        path = [(0.0, -0.4), (0.5, 0.4)]
        assert hit_time(b, path, "crossing") == 0.5
        assert hit_time(b, path, "nearest") is None

    def test_linear_between_columns_by_default(self):
        # 插值得 f(0.1) = 0.45，最近列为 0.5
        b = RootBarrier(xs=[-1.0, 0.0, 1.0], f=[0.0, 0.5, 0.0])
        path = [(0.0, 0.0), (0.46, 0.1)]
        assert hit_time(b, path) == 0.46
        assert hit_time(b, path, "linear") == 0.46
        assert hit_time(b, path, "nearest") is None
        assert b.column_values(0.1)[()] == pytest.approx(0.45)


class TestNonUniqueBarrier:
    """两个障碍对同一对测度给出相同嵌入：R 是 Q 在接触集上的正则化"""

    def setup_method(self):
        self.xs = np.linspace(-4.0, 4.0, 81)
        ax = np.abs(self.xs)
        outer = ax >= 3.0 - 1e-9
        q = np.full(len(self.xs), np.inf)
        q[outer | (np.abs(ax - 1.0) < 1e-9)] = 0.0
        q[ax < 1.0 - 1e-9] = 0.5
        r = np.full(len(self.xs), np.inf)
        r[outer | (ax <= 1.0 + 1e-9)] = 0.0
        self.q = RootBarrier(xs=self.xs, f=q)
        self.r = RootBarrier(xs=self.xs, f=r)
        self.mu = AtomicMeasure(atoms=[(-2.0, 0.5), (2.0, 0.5)])
        self.nu = AtomicMeasure(atoms=[(-3.0, 0.25), (-1.0, 0.25), (1.0, 0.25), (3.0, 0.25)])

    def test_regularization_of_q_is_r(self):
        contact = contact_set(self.mu, self.nu, self.xs)
        np.testing.assert_array_equal(regularize(self.q, contact).f, self.r.f)

    def test_union_and_intersection(self):
        np.testing.assert_array_equal(combine(self.q, self.r, "union").f, self.r.f)
        np.testing.assert_array_equal(combine(self.q, self.r, "intersection").f, self.q.f)

    def test_r_embeds_nu(self):
        cfg = SdeConfig(sigma=ConstantSigma(1.0), initial=self.mu, dt=1e-3, t_max=10.0,
                        n_paths=40_000, seed=11)
        report = simulate_embedding(cfg, self.r, max_workers=2)
        assert report.unstopped_fraction <= 1e-3
        atoms = self.nu.locations
        nearest = np.argmin(np.abs(report.x_samples[:, None] - atoms[None, :]), axis=1)
        assert np.max(np.abs(report.x_samples - atoms[nearest])) <= 0.2
        fractions = np.bincount(nearest, minlength=4) / report.n_paths
        np.testing.assert_allclose(fractions, 0.25, atol=0.01)
