import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmflow.bubbles import eval_Q
from hmflow.radial import (
    GridError,
    ProfileFormatError,
    RadialProfile,
    constant_profile,
    energy,
    energy_cumulative,
    energy_norm_sq,
    inner,
    integrate,
    make_grid,
    read_profile,
    resample,
    sector_of,
    tension,
    tension_l2,
    write_profile,
)


def gaussian_in_x(grid, a=1.0):
    return a * np.exp(-grid.x**2)


class TestGrid:
    def test_default_grid_endpoints(self, grid):
        assert grid.n == 4096
        assert grid.r_min == pytest.approx(1e-6)
        assert grid.r_max == pytest.approx(1e6)
        assert np.all(np.diff(grid.r) > 0)

    @pytest.mark.parametrize("args", [(1.0, 0.5, 100), (0.0, 1.0, 100), (1e-3, 1e3, 8)])
    def test_bad_grid_rejected(self, args):
        with pytest.raises(GridError):
            make_grid(*args)

    def test_band_refines_spacing(self):
        g = make_grid(1e-3, 1e3, 512, refinement_bands=((0.5, 2.0, 4.0),))
        base = math.log(1e6) / 511
        inside = np.diff(g.x)[(g.x[:-1] > math.log(0.6)) & (g.x[:-1] < math.log(1.6))]
        assert inside.max() <= base / 4 * 1.01
        assert g.bands == ((0.5, 2.0, 4.0),)

    def test_locate(self, grid):
        i = grid.locate(1.0)
        assert abs(grid.x[i]) <= 0.5 * np.max(np.diff(grid.x))


class TestQuadrature:
    def test_gaussian_integral(self, grid):
        # int_0^inf exp(-r^2) r dr = 1/2
        assert integrate(grid, np.exp(-grid.r**2)) == pytest.approx(0.5, rel=1e-9)

    def test_window_integral(self, grid):
        # int_1^2 r dr = 3/2
        assert integrate(grid, np.ones(grid.n), 1.0, 2.0) == pytest.approx(1.5, rel=1e-4)

    def test_inner_symmetric(self, grid):
        f, g = np.exp(-grid.r), np.exp(-2 * grid.r)
        assert inner(grid, f, g) == pytest.approx(inner(grid, g, f))
        # int exp(-3r) r dr = 1/9
        assert inner(grid, f, g) == pytest.approx(1 / 9, rel=1e-9)

    def test_sample_shape_checked(self, grid):
        with pytest.raises(GridError):
            integrate(grid, np.ones(10))


class TestEnergy:
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_bubble_energy(self, grid, k):
        assert energy(eval_Q(1.0, k, grid)).total == pytest.approx(4 * math.pi * k, rel=1e-6)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_bubble_half_energy_inside_scale(self, grid, k):
        # r -> 1/r symmetry splits the energy evenly at r = lambda
        assert energy(eval_Q(1.0, k, grid), 0.0, 1.0).total == pytest.approx(2 * math.pi * k, rel=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(lam=st.floats(1e-2, 1e2), k=st.integers(1, 3))
    def test_energy_scale_invariant(self, lam, k):
        g = make_grid()
        assert energy(eval_Q(lam, k, g)).total == pytest.approx(4 * math.pi * k, rel=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(a=st.floats(1e-3, 1e3))
    def test_energy_windows_add(self, a):
        g = make_grid(n=1024)
        p = eval_Q(1.0, 2, g)
        total = energy(p).total
        assert energy(p, 0.0, a).total + energy(p, a).total == pytest.approx(total, rel=1e-12)

    def test_cumulative_matches_total(self, grid):
        p = eval_Q(1.0, 1, grid)
        assert energy_cumulative(p)[-1] == pytest.approx(energy(p).total, rel=1e-12)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_energy_norm_gaussian(self, grid, k):
        # with g = exp(-x^2): int (g_x^2 + k^2 g^2) dx = (1 + k^2) sqrt(pi / 2)
        g = gaussian_in_x(grid)
        assert energy_norm_sq(grid, g, k) == pytest.approx((1 + k * k) * math.sqrt(math.pi / 2), rel=1e-8)

    def test_vacuum_has_zero_energy(self, grid):
        assert energy(constant_profile(grid, 2)).total == pytest.approx(0.0, abs=1e-20)


class TestTension:
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_bubble_is_critical(self, grid, k):
        p = eval_Q(1.0, k, grid)
        bulk = np.abs(grid.x) < 10
        # fourth-order truncation error, growing like k^6 h^4
        assert np.max(np.abs(tension(p)[bulk]) * grid.r[bulk] ** 2) < 1e-8 * k**6
        assert tension_l2(p) < 1e-4

    @pytest.mark.parametrize("k", [1, 2])
    def test_matches_analytic_formula(self, grid, k):
        u = gaussian_in_x(grid, 0.3)
        x, r = grid.x, grid.r
        uxx = 0.3 * (4 * x**2 - 2) * np.exp(-x**2)
        exact = (uxx - 0.5 * k * k * np.sin(2 * u)) / r**2
        got = tension(RadialProfile(grid, u, (0, 0), k))
        sel = np.abs(x) < 4
        assert np.max(np.abs(got[sel] - exact[sel]) * r[sel] ** 2) < 1e-7

    def test_is_exact_negative_gradient(self, grid):
        u = eval_Q(1.0, 2, grid).u + gaussian_in_x(grid, 0.2)
        p = RadialProfile(grid, u, (0, 1), 2)
        phi = np.exp(-((grid.x - 0.5) ** 2))
        s = 1e-6
        dE = (energy(p.with_values(u + s * phi)).total - energy(p.with_values(u - s * phi)).total) / (2 * s)
        T = tension(p)
        pairing = float(np.dot(T[1:-1] * phi[1:-1], grid.weights[1:-1]))
        assert -2 * math.pi * pairing == pytest.approx(dE, rel=1e-6)


class TestSectors:
    def test_sector_of_bubble(self, grid):
        assert sector_of(eval_Q(1.0, 1, grid).u) == (0, 1)

    def test_ambiguous_end(self):
        assert sector_of(np.array([0.0, 1.0, math.pi / 2])) is None

    def test_profile_check(self, grid):
        p = RadialProfile(grid, eval_Q(1.0, 1, grid).u, (0, 2), 1)
        with pytest.raises(ValueError):
            p.check()


class TestResample:
    def test_same_grid_is_identity(self, grid):
        p = eval_Q(1.0, 1, grid)
        assert np.array_equal(resample(p, grid).u, p.u)

    def test_round_trip_through_finer_grid(self):
        coarse = make_grid(1e-4, 1e4, 1024)
        p = eval_Q(1.0, 1, coarse)
        back = resample(resample(p, make_grid(1e-4, 1e4, 4096)), coarse)
        assert np.max(np.abs(back.u - p.u)) < 1e-7

    def test_extends_with_boundary_values(self):
        p = eval_Q(1.0, 1, make_grid(1e-2, 1e2, 256))
        out = resample(p, make_grid(1e-4, 1e4, 512))
        assert out.u[0] == 0.0 and out.u[-1] == math.pi


class TestProfileIO:
    def test_round_trip_exact(self, tmp_path, grid):
        p = eval_Q(0.3, 2, grid)
        path = tmp_path / "q.txt"
        write_profile(p, path, t="0.5")
        q = read_profile(path)
        assert np.array_equal(q.u, p.u)
        assert np.array_equal(q.grid.r, grid.r)
        assert (q.sector, q.k, q.meta["t"]) == (p.sector, 2, "0.5")

    def test_corrupt_row_reports_offset(self, tmp_path):
        p = eval_Q(1.0, 1, make_grid(1e-2, 1e2, 32))
        path = tmp_path / "q.txt"
        write_profile(p, path)
        text = path.read_bytes()
        cut = text.index(b"\n", len(text) // 2) + 1
        path.write_bytes(text[:cut] + b"garbage here\n" + text[cut:])
        with pytest.raises(ProfileFormatError, match=f"byte offset {cut}"):
            read_profile(path)

    def test_truncated_file(self, tmp_path):
        p = eval_Q(1.0, 1, make_grid(1e-2, 1e2, 32))
        path = tmp_path / "q.txt"
        write_profile(p, path)
        lines = path.read_text().splitlines(keepends=True)
        path.write_text("".join(lines[:-3]))
        with pytest.raises(ProfileFormatError, match="expected 32 rows"):
            read_profile(path)
