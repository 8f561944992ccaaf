import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmflow.bubbles import BubbleConfig, eval_Q, eval_Z, lambda_q_values, multi_bubble
from hmflow.decomposition import (
    TimeContext,
    detect_collisions,
    extract_body_map,
    fit_delta_R,
    fit_distance,
    half_level_crossings,
    modulate,
    proximity_d,
    track_scales,
    write_analysis_csv,
)
from hmflow.flow import FlowState
from hmflow.radial import RadialProfile, constant_profile, energy_norm, inner, make_grid


def orthogonal_bump(grid, lam, k, center=2.0):
    """Smooth bump with <Z_lam | phi> = 0, corrected along Lambda Q_lam."""
    phi = np.exp(-(np.log(grid.r / center) ** 2))
    z = eval_Z(lam, k, grid)
    lq = lambda_q_values(grid.r, lam, k)
    return phi - inner(grid, z, phi) / inner(grid, z, lq) * lq


class TestCrossings:
    def test_single_bubble(self, grid):
        cr = half_level_crossings(grid, eval_Q(0.3, 2, grid).u)
        assert len(cr) == 1
        assert cr[0].r == pytest.approx(0.3, rel=1e-3) and cr[0].sign == 1

    def test_two_bubbles_signs(self, grid):
        c = BubbleConfig(0, (1, -1), (0.01, 1.0), 2)
        cr = half_level_crossings(grid, c.values(grid.r))
        assert [c.sign for c in cr] == [1, -1]
        assert [c.r for c in cr] == pytest.approx([0.01, 1.0], rel=2e-2)


class TestFitDeltaR:
    def test_vacuum(self, grid):
        d = fit_delta_R(constant_profile(grid, 1), 100.0)
        assert d.distance == 0.0 and d.M == 0

    def test_single_bubble_boundary_term(self, grid):
        d = fit_delta_R(eval_Q(1.0, 1, grid), 100.0)
        # error norm ~ 0, distance is the boundary term sqrt(1 / R)
        assert d.distance <= 0.1
        assert d.distance == pytest.approx(math.sqrt(1 / 100.0), rel=0.05)

    def test_two_bubble_round_trip(self, grid):
        c = BubbleConfig(1, (1, -1), (0.01, 1.0), 1)
        d = fit_delta_R(multi_bubble(c, grid), 1e3)
        assert d.M == 2
        assert d.config.lambdas == pytest.approx((0.01, 1.0), rel=0.02)

    @settings(max_examples=10, deadline=None)
    @given(log_lam=st.floats(-1.5, 0.5), k=st.integers(1, 3), sign=st.sampled_from([-1, 1]))
    def test_sound_on_exact_configs(self, log_lam, k, sign):
        g = make_grid(n=2048)
        lam = 10**log_lam
        c = BubbleConfig(1 if sign > 0 else -1, (sign,), (lam,), k)
        R = 100.0
        d = fit_delta_R(multi_bubble(c, g), R)
        assert d.distance**2 <= (lam / R) ** k + 1e-6

    def test_distance_identity(self, grid):
        p = eval_Q(1.0, 2, grid)
        p = p.with_values(p.u + 0.02 * np.exp(-grid.x**2))
        d = fit_delta_R(p, 100.0)
        assert d.distance**2 == pytest.approx(d.error_norm**2 + sum(d.gap_terms), rel=1e-10)

    def test_window_outside_grid(self, grid):
        with pytest.raises(ValueError):
            fit_delta_R(eval_Q(1.0, 1, grid), 1e9)


class TestProximity:
    def test_exact_config_gives_gap_terms(self, grid):
        c = BubbleConfig(0, (1, -1), (1e-3, 1e-1), 2)
        ctx = TimeContext(1e4)
        d = proximity_d(multi_bubble(c, grid), None, 0, 0.0, ctx, 2)
        gaps = (1e-3 / 1e-1) ** 2 + (1e-1 / 100.0) ** 2
        assert d.distance == pytest.approx(math.sqrt(gaps), rel=1e-3)

    def test_all_interior(self, grid):
        c = BubbleConfig(1, (1,), (1e-3,), 2)
        rho = 0.1
        d = proximity_d(multi_bubble(c, grid), None, 1, rho, TimeContext(1e4), 1)
        expected = (rho / 100.0) ** 2 + d.error_norm**2
        assert d.distance == pytest.approx(math.sqrt(expected), rel=1e-9)

    def test_needs_time_context(self, grid):
        with pytest.raises(ValueError):
            proximity_d(eval_Q(1.0, 1, grid), None, 0, 0.0, None, 1)

    def test_blowup_family_distance_vanishes(self, grid):
        T = 1.0
        ds = []
        for s in (1e-2, 1e-4, 1e-6):
            lam = math.sqrt(s) / math.log(math.e + 1 / s)
            d = proximity_d(eval_Q(lam, 2, grid), None, 0, 0.0, TimeContext(T - s, T), 1)
            ds.append(d.distance)
        assert ds[0] > ds[1] > ds[2]
        assert ds[-1] < 0.1

    def test_outer_scale_conventions(self):
        assert TimeContext(4.0).outer_scale() == 2.0
        assert TimeContext(0.75, 1.0).outer_scale() == 0.5
        with pytest.raises(ValueError):
            TimeContext(0.0).outer_scale()


class TestFitDistance:
    def test_two_bubble(self, grid):
        c = BubbleConfig(0, (1, -1), (0.01, 1.0), 2)
        d = fit_distance(multi_bubble(c, grid), 0, 2)
        # zero error norm: distance = sqrt((0.01 / 1)^2)
        assert d.distance == pytest.approx(0.01, rel=1e-3)
        assert d.config.lambdas == pytest.approx((0.01, 1.0), rel=1e-4)


class TestModulation:
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_exact_bubble(self, grid, k):
        st_ = modulate(eval_Q(0.7, k, grid), None, BubbleConfig(1, (1,), (0.7,), k))
        assert st_.lambdas[0] == pytest.approx(0.7, rel=1e-12)
        assert st_.error_norm < 1e-10
        assert max(abs(r) for r in st_.residuals) < 1e-10

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_orthogonal_perturbation_kept(self, grid, k):
        phi = orthogonal_bump(grid, 1.0, k)
        q = eval_Q(1.0, k, grid)
        st_ = modulate(q.with_values(q.u + 0.01 * phi), None, BubbleConfig(1, (1,), (1.0,), k))
        assert st_.lambdas[0] == pytest.approx(1.0, rel=1e-9)
        assert np.max(np.abs(st_.error - 0.01 * phi)) < 1e-9

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_rescaled_bubble(self, grid, k):
        st_ = modulate(eval_Q(1.05, k, grid), None, BubbleConfig(1, (1,), (1.0,), k))
        assert st_.lambdas[0] == pytest.approx(1.05, rel=1e-6)

    def test_two_bubbles(self, grid):
        c = BubbleConfig(0, (1, -1), (0.01, 1.0), 2)
        guess = BubbleConfig(0, (1, -1), (0.0105, 0.97), 2)
        st_ = modulate(multi_bubble(c, grid), None, guess)
        assert st_.lambdas == pytest.approx((0.01, 1.0), rel=1e-8)


class TestTracking:
    def test_moving_scale(self, grid):
        times = np.linspace(0.05, 1.0, 20)
        traj = [FlowState(t, eval_Q(1 - t / 2, 2, grid)) for t in times]
        tr = track_scales(traj, None, BubbleConfig(1, (1,), (1 - times[0] / 2,), 2))
        assert np.allclose(tr.lambdas()[:, 0], 1 - times / 2, rtol=1e-4)
        assert tr.lost_count == 0

    def test_stationary(self, grid):
        traj = [FlowState(t, eval_Q(1.0, 3, grid)) for t in (1.0, 2.0, 3.0)]
        tr = track_scales(traj)
        assert tr.N == 1
        assert np.allclose(tr.lambdas()[:, 0], 1.0, rtol=1e-6)

    def test_csv(self, tmp_path, grid):
        traj = [FlowState(t, eval_Q(1.0, 2, grid)) for t in (1.0, 2.0)]
        write_analysis_csv(tmp_path / "a.csv", track_scales(traj))
        header = (tmp_path / "a.csv").read_text().splitlines()[0]
        assert header.startswith("t,d,N_fit,lambda_1,")


class TestCollisions:
    def test_flat_series(self):
        t = np.linspace(0, 1, 11)
        rep = detect_collisions(t, np.full(11, 0.01), np.ones((11, 1)), 0.05, 0.3)
        assert rep.intervals == []

    def test_triangle(self):
        t = np.linspace(0, 1, 101)
        d = np.where(t < 0.5, 0.02 + t, 1.02 - t)
        lam = np.column_stack([np.linspace(0.01, 0.5, 101), np.ones(101)])
        rep = detect_collisions(t, d, lam, 0.05, 0.3)
        assert len(rep.intervals) == 1
        iv = rep.intervals[0]
        assert (iv.a, iv.b) == pytest.approx((0.03, 0.28), abs=1e-9)
        assert iv.K == 1

    def test_thresholds_ordered(self):
        with pytest.raises(ValueError):
            detect_collisions([0, 1], [0, 1], [[1], [1]], 0.3, 0.3)


class TestBodyMap:
    def test_global_is_zero(self, grid):
        traj = [FlowState(t, eval_Q(1.0, 1, grid)) for t in (1.0, 2.0)]
        u_star, m_delta = extract_body_map(traj, None, "reached_t_end")
        assert np.all(u_star.u == 0) and m_delta == 1

    def test_recovers_smooth_part(self, grid):
        v = 0.3 * np.exp(-(np.log(grid.r / 5.0) ** 2))
        times = 1 - np.array([1e-1, 1e-2, 1e-3, 1e-4])
        traj = [FlowState(t, RadialProfile(grid, eval_Q(1 - t, 1, grid).u + v, (0, 1), 1)) for t in times]
        u_star, m_delta = extract_body_map(traj, 1.0)
        assert m_delta == 1
        assert energy_norm(grid, u_star.u - v, 1, 1.0) < 1e-3

    def test_pure_bubble(self, grid):
        times = 1 - np.array([1e-1, 1e-2, 1e-3, 1e-4])
        traj = [FlowState(t, eval_Q(1 - t, 2, grid)) for t in times]
        u_star, _ = extract_body_map(traj, 1.0)
        assert energy_norm(grid, u_star.u, 2, 1.0) < 1e-3

    def test_needs_checkpoints(self, grid):
        with pytest.raises(ValueError):
            extract_body_map([FlowState(0.5, eval_Q(0.1, 1, grid))], 1.0)
