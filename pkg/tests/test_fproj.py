import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from redsplan.core import EgoState, ModelParams, PlannerParams, obstacle_track, rollout
from redsplan.fproj import (
    EllipseObstacle,
    FpWeights,
    certify,
    ellipse_params,
    ellipse_residual,
    ellipse_tracks,
    ellipse_values,
    linearize_ellipse,
    project_plan,
    sqp_project,
)


def straight(m, v=15.0, n=0.0):
    U = np.zeros((m.N, 2))
    return rollout(np.array([0.0, n, v, 0.0]), U, m.t_d), U


class TestEllipse:
    def test_params_example(self):
        e = ellipse_params((10, 0, 2, -2))
        np.testing.assert_allclose(e.t, [5, 0])
        np.testing.assert_allclose(e.semi_axes, [7.0711, 2.8284], atol=1e-4)

    def test_symmetric_and_unit(self):
        np.testing.assert_array_equal(ellipse_params((3, -3, 1, -1)).t, [0, 0])
        np.testing.assert_allclose(ellipse_params((0.5, -0.5, 0.5, -0.5)).semi_axes, [2**-0.5] * 2)

    def test_degenerate(self):
        with pytest.raises(ValueError):
            ellipse_params((1, 1, 2, -2))
        with pytest.raises(ValueError):
            EllipseObstacle([0, 0], [[1, 0.1], [0, 1]])

    def test_residual_examples(self):
        e = EllipseObstacle([1.0, 2.0], [3.0, 0.5])
        g, grad = ellipse_residual(e.t, e)
        assert g == 0.0 and not np.any(grad)
        assert ellipse_residual(e.t + [3.0, 0.0], e)[0] == pytest.approx(1.0)
        assert ellipse_residual(e.t + [0.0, -0.5], e)[0] == pytest.approx(1.0)

    def test_corners_on_boundary(self):
        d = np.array([12.0, 2.0, 3.0, -1.0])
        e = ellipse_params(d)
        for s in d[:2]:
            for n in d[2:]:
                assert ellipse_residual([s, n], e)[0] == pytest.approx(1.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        e = EllipseObstacle(rng.normal(size=2) * 5, rng.uniform(0.5, 8, 2))
        p = rng.normal(size=2) * 6
        _, grad = ellipse_residual(p, e)
        h = 1e-5
        fd = np.array([(ellipse_residual(p + h * d, e)[0] - ellipse_residual(p - h * d, e)[0]) / (2 * h)
                       for d in np.eye(2)])
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-9)


class TestLinearization:
    def test_tangent_on_boundary(self):
        e = EllipseObstacle([0, 0], [2.0, 1.0])
        p = np.array([2 * np.cos(0.7), np.sin(0.7)])
        a, b = linearize_ellipse(p, e)
        assert a @ p == pytest.approx(b)

    def test_far_point_strict(self):
        e = EllipseObstacle([0, 0], [2.0, 1.0])
        p = np.array([30.0, -4.0])
        a, b = linearize_ellipse(p, e)
        assert a @ p > b

    def test_center_is_perturbed(self):
        a, b = linearize_ellipse([0.0, 0.0], EllipseObstacle([0, 0], [1.0, 1.0]))
        assert a[0] > 0 and np.isfinite(b)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_inner_approximation(self, seed):
        rng = np.random.default_rng(seed)
        e = EllipseObstacle(rng.normal(size=2) * 3, rng.uniform(0.3, 6, 2))
        a, b = linearize_ellipse(e.t + rng.normal(size=2) * 4, e)
        P = e.t + rng.uniform(-15, 15, (10_000, 2))
        keep = P @ a >= b
        g = np.sum(((P[keep] - e.t) / e.semi_axes) ** 2, axis=1)
        assert np.all(g >= 1 - 1e-9)


class TestProjection:
    def test_feasible_reference_is_fixed_point(self):
        m = ModelParams(N=10)
        X, U = straight(m)
        far = np.tile([[500.0, 0.0, 5.0, 2.0]], (11, 1, 1))
        sol = sqp_project(X, U, far, m, 2)
        assert sol.certified and sol.n_iter == 1
        np.testing.assert_allclose(sol.X, X, atol=1e-6)
        np.testing.assert_allclose(sol.U, U, atol=1e-6)

    def test_static_ellipse_is_cleared(self):
        m = ModelParams(N=20)
        X, U = straight(m)
        pi = PlannerParams(EgoState(0, 0, 15, 0), 15, 2, (obstacle_track(30.0, 0.0, 0.0, m),), 0.0)
        E = ellipse_tracks(pi)
        assert not certify(X, E)
        sol = sqp_project(X, U, E, m, 2)
        assert sol.certified
        assert np.all(ellipse_values(sol.X, E) >= 1 - 1e-8)
        np.testing.assert_allclose(rollout(X[0], sol.U, m.t_d), sol.X, atol=1e-6)

    def test_zero_penalty_returns_reference(self):
        m = ModelParams(N=20)
        X, U = straight(m)
        pi = PlannerParams(EgoState(0, 0, 15, 0), 15, 2, (obstacle_track(30.0, 0.0, 0.0, m),), 0.0)
        sol = project_plan(pi, X, U, m, FpWeights(w_h=0.0))
        np.testing.assert_allclose(sol.X, X, atol=1e-6)
        assert not sol.certified

    @pytest.mark.parametrize("seed", range(8))
    def test_slack_decrease_and_merit(self, seed):
        rng = np.random.default_rng(seed)
        m = ModelParams(N=20)
        X, U = straight(m, v=rng.uniform(8, 20), n=rng.uniform(-0.5, 0.5))
        obs = tuple(obstacle_track(rng.uniform(10, 80), rng.uniform(-1.5, 1.5), rng.uniform(0, 10), m)
                    for _ in range(rng.integers(1, 4)))
        pi = PlannerParams(EgoState(*X[0]), 15, 2, obs, 0.0)
        sol = project_plan(pi, X, U, m)
        scale = 1e-8 * max(1.0, sol.J_slack0)
        merit = [tr + sl for tr, sl in sol.iterates]
        assert all(v <= sol.J_slack0 + scale for v in merit)
        assert all(b <= a + scale for a, b in zip(merit, merit[1:]))
        # feasibility is kept once reached
        zero = [sl == 0.0 for _, sl in sol.iterates]
        if True in zero:
            assert all(zero[zero.index(True):])
        if sol.certified:
            assert np.all(ellipse_values(sol.X, ellipse_tracks(pi)) >= 1 - 1e-8)

    def test_shape_checks(self):
        m = ModelParams(N=5)
        X, U = straight(m)
        with pytest.raises(ValueError):
            sqp_project(X[:-1], U, np.zeros((6, 0, 4)), m, 2)
        with pytest.raises(ValueError):
            sqp_project(X, U, np.zeros((5, 1, 4)), m, 2)
