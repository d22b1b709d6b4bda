import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from redsplan.core import (
    REGIONS,
    EgoState,
    ModelParams,
    ObstacleBounds,
    PlannerParams,
    check_hard_constraints,
    collision_bounds,
    discretize_dynamics,
    lateral_accel_bounds,
    obstacle_track,
    outer_bounds,
    predict_obstacle_bounds,
    reference_lateral,
    region_halfspaces,
    region_rows,
    rollout,
)


class TestDynamics:
    def test_zero_step_is_identity(self):
        A, B = discretize_dynamics(0.0)
        np.testing.assert_array_equal(A, np.eye(4))
        np.testing.assert_array_equal(B, np.zeros((4, 2)))

    @pytest.mark.parametrize("t_d, pos, vel", [(0.2, 0.02, 0.2), (1.0, 0.5, 1.0)])
    def test_entries(self, t_d, pos, vel):
        A, B = discretize_dynamics(t_d)
        assert A[0, 2] == A[1, 3] == t_d
        assert B[0, 0] == pytest.approx(pos) and B[1, 1] == pytest.approx(pos)
        assert B[2, 0] == B[3, 1] == pytest.approx(vel)
        assert B[0, 1] == B[1, 0] == 0.0

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            discretize_dynamics(-0.1)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 30), st.floats(0.01, 1.0), st.integers(0, 2**31 - 1))
    def test_rollout_matches_closed_form(self, N, t_d, seed):
        rng = np.random.default_rng(seed)
        x0 = rng.normal(size=4) * 10
        U = rng.normal(size=(N, 2)) * 3
        X = rollout(x0, U, t_d)
        # closed form of piecewise constant acceleration
        pos, vel = x0[:2].copy(), x0[2:].copy()
        for i in range(N):
            pos = pos + vel * t_d + 0.5 * U[i] * t_d**2
            vel = vel + U[i] * t_d
            np.testing.assert_allclose(X[i + 1, :2], pos, rtol=0, atol=1e-9)
            np.testing.assert_allclose(X[i + 1, 2:], vel, rtol=0, atol=1e-12 * (1 + np.abs(vel).max()))


class TestLateralBounds:
    @pytest.mark.parametrize("args, want", [((5, 0, 20), (-5, 5)), ((5, 0.01, 10), (-4, 6)),
                                            ((3, 0, 0), (-3, 3))])
    def test_examples(self, args, want):
        assert lateral_accel_bounds(*args) == pytest.approx(want)

    def test_model_control_bounds_use_initial_speed(self):
        m = ModelParams(kappa_max=0.01)
        lb, ub = m.control_bounds(10.0)
        assert lb[1] == pytest.approx(-4.0) and ub[1] == pytest.approx(5.0)  # clipped by ub_u


class TestRegions:
    d = (20.0, 10.0, 5.0, 1.0)

    def test_front(self):
        A, b = region_halfspaces(self.d, "f")
        np.testing.assert_array_equal(A, [[-1, 0]])
        np.testing.assert_array_equal(b, [-20])

    def test_left_strip(self):
        A, b = region_halfspaces(self.d, "l")
        inside = lambda s, n: bool(np.all(A @ [s, n] <= b))
        assert inside(15, 6) and inside(10, 5) and inside(20, 5)
        assert not inside(15, 4.9) and not inside(20.1, 6) and not inside(9.9, 6)

    def test_unknown_region(self):
        with pytest.raises(ValueError):
            region_halfspaces(self.d, "x")

    def test_inside_point_violates_all(self):
        for k in REGIONS:
            A, b = region_halfspaces(self.d, k)
            assert np.any(A @ [15.0, 3.0] > b)

    def test_exterior_cover(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            c = rng.uniform(-50, 50, 2)
            h = rng.uniform(0.5, 10, 2)
            d = (c[0] + h[0], c[0] - h[0], c[1] + h[1], c[1] - h[1])
            P = c + rng.uniform(-3, 3, (50_000, 2)) * h
            outside = (np.abs(P[:, 0] - c[0]) > h[0]) | (np.abs(P[:, 1] - c[1]) > h[1])
            covered = np.zeros(len(P), bool)
            for k in REGIONS:
                A, b = region_halfspaces(d, k)
                covered |= np.all(P @ A.T <= b, axis=1)
            np.testing.assert_array_equal(covered, outside)

    def test_vectorised_rows_match_per_region(self):
        rng = np.random.default_rng(1)
        bounds = np.sort(rng.normal(size=(3, 2, 2)), axis=-1)[..., ::-1].reshape(3, 4)
        margins = (0.5, 12.0, 0.5, 0.5)
        A, b, sig = region_rows(bounds, margins)
        starts = {"f": [0], "b": [1], "l": [2, 3, 4], "r": [5, 6, 7]}
        for j in range(3):
            for k, m in zip(REGIONS, margins):
                Ak, bk = region_halfspaces(bounds[j], k)
                np.testing.assert_array_equal(A[starts[k]], Ak)
                np.testing.assert_array_equal(b[j, starts[k]], bk)
                assert np.all(sig[starts[k]] == m)


class TestHardConstraints:
    def test_zero_trajectory(self):
        m = ModelParams()
        assert check_hard_constraints(np.zeros((3, 4)), np.zeros((2, 2)), m).max == 0.0

    def test_velocity_ratio(self):
        X = np.zeros((2, 4))
        X[:, 2] = 10.0
        X[:, 3] = 4.0
        rep = check_hard_constraints(X, np.zeros((1, 2)), ModelParams())
        assert rep.ratio == pytest.approx(0.1 * 10.0)

    def test_control_bound(self):
        U = np.array([[4.0, 0.0]])
        rep = check_hard_constraints(np.zeros((2, 4)), U, ModelParams())
        assert rep.control == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            check_hard_constraints(np.zeros((3, 4)), np.zeros((3, 2)), ModelParams())


class TestObstaclePrediction:
    def test_static(self):
        tr = predict_obstacle_bounds(ObstacleBounds(5, 0, 2, -2), 0.0, ModelParams())
        assert np.all(tr.bounds == tr.bounds[0])

    def test_shift(self):
        tr = predict_obstacle_bounds(ObstacleBounds(5, 0, 2, -2), 10.0, ModelParams(t_d=0.2))
        np.testing.assert_allclose(tr.bounds[5, :2] - tr.bounds[0, :2], [10.0, 10.0])
        np.testing.assert_array_equal(tr.bounds[:, 2:], tr.bounds[[0], 2:].repeat(21, 0))
        assert tr.horizon == 20

    def test_negative_speed_moves_back(self):
        tr = predict_obstacle_bounds(ObstacleBounds(5, 0, 2, -2), -3.0, ModelParams())
        assert np.all(np.diff(tr.bounds[:, 0]) < 0)

    def test_degenerate_bounds_rejected(self):
        with pytest.raises(ValueError):
            ObstacleBounds(0, 1, 2, -2)


class TestGeometry:
    def test_outer_and_collision_rectangles(self):
        d = outer_bounds(10.0, 3.5)
        c = collision_bounds(d)
        # collision rectangle is the obstacle grown by the ego half-dimensions
        np.testing.assert_allclose(c, [10 + 5.39, 10 - 5.39, 3.5 + 2.07, 3.5 - 2.07])
        assert d.s_f - d.s_b == pytest.approx(np.sqrt(2) * (c[0] - c[1]))

    def test_reference_lateral(self):
        lam = np.array([[1, 0], [0, 0], [0, 1]])
        np.testing.assert_allclose(reference_lateral(0.0, lam, 3.5), [0, 3.5, 3.5, 0])

    def test_lane_helpers(self):
        m = ModelParams()
        assert m.road_limits(2) == (-1.75, 5.25)
        assert [m.lane_of(n, 3) for n in (-3.0, 1.7, 1.8, 9.0)] == [0, 0, 1, 2]
        lb, ub = m.state_bounds(2)
        assert lb[1] == pytest.approx(-0.75) and ub[1] == pytest.approx(4.25)


class TestPlannerParams:
    def test_validate(self):
        m = ModelParams(N=5)
        ob = obstacle_track(10, 0, 5, m)
        pi = PlannerParams(EgoState(0, 0, 10, 0), 15, 2, (ob,), 0.0)
        assert pi.validate(m) is pi
        with pytest.raises(ValueError):
            pi.validate(ModelParams(N=6))
        with pytest.raises(ValueError):
            PlannerParams(EgoState(0, 0, 10, 0), 15, 4, ()).validate(m)

    def test_permuted(self):
        m = ModelParams(N=3)
        obs = [obstacle_track(s, 0, 0, m) for s in (10, 20, 30)]
        pi = PlannerParams(EgoState(0, 0, 10, 0), 15, 2, obs)
        assert pi.permuted([2, 0, 1]).obstacles == (obs[2], obs[0], obs[1])
