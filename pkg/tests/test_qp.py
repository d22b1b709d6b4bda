import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from redsplan.qp import QpError, QpProblem, kkt_residuals, polish, solve, solve_qp


def box_qp(rng, n=20, cond=1.0):
    L = rng.normal(size=(n, n))
    H = L @ L.T / n + cond * np.eye(n)
    g = rng.normal(size=n) * 3
    lb = -rng.uniform(0.1, 1.0, n)
    ub = rng.uniform(0.1, 1.0, n)
    return H, g, lb, ub


def projected_gradient(H, g, lb, ub, iters=200_000, tol=1e-14):
    """Independent oracle: projected gradient with step 1/L until the iterate settles."""
    step = 1.0 / np.linalg.eigvalsh(H).max()
    x = np.clip(np.zeros_like(g), lb, ub)
    for _ in range(iters):
        xn = np.clip(x - step * (H @ x + g), lb, ub)
        if np.max(np.abs(xn - x)) < tol:
            return xn
        x = xn
    return x


def random_general(rng, n=12, m_eq=3, m_in=8):
    L = rng.normal(size=(n, n))
    H = L @ L.T + 0.05 * np.eye(n)
    x_feas = rng.normal(size=n)
    A_eq = rng.normal(size=(m_eq, n))
    A_in = rng.normal(size=(m_in, n))
    ax = A_in @ x_feas
    return QpProblem(sp.csr_matrix(H), rng.normal(size=n) * 5, A_eq, A_eq @ x_feas, A_in,
                     ax - rng.uniform(0.1, 2, m_in), ax + rng.uniform(0.1, 2, m_in),
                     x_feas - rng.uniform(0.5, 3, n), x_feas + rng.uniform(0.5, 3, n))


class TestSmallExamples:
    def test_bound_active(self):
        sol = solve_qp(QpProblem(np.array([[2.0]]), [0.0], lb=[1.0]))
        assert sol.ok
        assert sol.x[0] == pytest.approx(1.0, abs=1e-8)
        assert sol.objective == pytest.approx(1.0, abs=1e-8)

    def test_unconstrained(self):
        c = np.array([1.0, -2.0, 3.0])
        sol = solve_qp(QpProblem(2 * np.eye(3), -2 * c))
        np.testing.assert_allclose(sol.x, c, atol=1e-9)

    def test_infeasible(self):
        p = QpProblem(np.eye(1), [0.0], A_in=np.array([[1.0]]), lb_in=[2.0], ub=[1.0])
        for backend in ("ipm", "clarabel"):
            assert solve(p, backend).status == "infeasible"

    def test_non_psd_rejected(self):
        with pytest.raises(QpError):
            solve_qp(QpProblem(np.diag([1.0, -1.0]), [0.0, 0.0]))

    def test_dimension_mismatch(self):
        with pytest.raises(QpError):
            QpProblem(np.eye(2), [0.0, 0.0, 0.0])

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            solve(QpProblem(np.eye(1), [0.0]), "nope")


class TestOracle:
    @pytest.mark.parametrize("seed", range(5))
    def test_projected_gradient_oracle(self, seed):
        rng = np.random.default_rng(seed)
        H, g, lb, ub = box_qp(rng)
        x_ref = projected_gradient(H, g, lb, ub)
        f_ref = 0.5 * x_ref @ H @ x_ref + g @ x_ref
        for backend in ("ipm", "clarabel"):
            sol = solve(QpProblem(H, g, lb=lb, ub=ub), backend)
            assert sol.ok
            assert sol.objective == pytest.approx(f_ref, abs=1e-6)
            np.testing.assert_allclose(sol.x, x_ref, atol=1e-5)

    @pytest.mark.parametrize("seed", range(10))
    def test_backends_agree_on_general_qp(self, seed):
        p = random_general(np.random.default_rng(100 + seed))
        a, b = solve(p, "ipm"), solve(p, "clarabel")
        assert a.ok and b.ok
        assert a.objective == pytest.approx(b.objective, rel=1e-7, abs=1e-7)


class TestKkt:
    @pytest.mark.parametrize("seed", range(5))
    def test_optimal_residuals(self, seed):
        p = random_general(np.random.default_rng(seed))
        sol = solve_qp(p)
        assert sol.ok
        assert max(kkt_residuals(p, sol)) <= 1e-8 * max(1.0, np.abs(p.g).max())

    @pytest.mark.parametrize("seed", range(5))
    def test_duality_gap(self, seed):
        p = random_general(np.random.default_rng(seed))
        sol = solve_qp(p)
        gap = sol.objective - sol.dual_objective(p)
        assert abs(gap) <= 1e-6 * max(1.0, abs(sol.objective))

    def test_perturbation_raises_stationarity(self):
        rng = np.random.default_rng(3)
        H, g, _, _ = box_qp(rng, n=10)
        p = QpProblem(H, g)
        sol = solve_qp(p)
        bumped = type(sol)(**{**sol.__dict__, "x": sol.x + 1e-3 * np.ones(10)})
        stat = kkt_residuals(p, bumped)[0]
        # H (1e-3 * ones) is the exact change of the gradient
        assert stat == pytest.approx(np.abs(H @ (1e-3 * np.ones(10))).max(), rel=1e-6)
        assert stat >= 1e-3

    def test_zero_problem(self):
        p = QpProblem(sp.csr_matrix((3, 3)), np.zeros(3))
        sol = solve_qp(p)
        assert sol.ok
        assert kkt_residuals(p, sol) == (0.0, 0.0, 0.0)


class TestPolish:
    @pytest.mark.parametrize("seed", range(5))
    def test_polish_keeps_or_improves(self, seed):
        p = random_general(np.random.default_rng(200 + seed))
        sol = solve(p, "ipm")
        pol = polish(p, sol)
        assert pol.ok
        assert pol.objective <= sol.objective + 1e-9
        stat, prim, _ = kkt_residuals(p, pol)
        assert prim <= 1e-8


class TestProperties:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 15))
    def test_box_qp_matches_oracle(self, seed, n):
        rng = np.random.default_rng(seed)
        H, g, lb, ub = box_qp(rng, n=n)
        sol = solve_qp(QpProblem(H, g, lb=lb, ub=ub))
        x_ref = projected_gradient(H, g, lb, ub)
        assert sol.objective == pytest.approx(0.5 * x_ref @ H @ x_ref + g @ x_ref, abs=1e-6)

    def test_deterministic(self):
        p = random_general(np.random.default_rng(9))
        a, b = solve_qp(p), solve_qp(p)
        assert np.array_equal(a.x, b.x) and a.objective == b.objective
