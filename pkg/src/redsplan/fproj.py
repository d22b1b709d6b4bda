"""Projection of a planned trajectory out of elliptic obstacle sets.

The exterior of an ellipse is a concave constraint ``g(p) >= 1 - xi``. Each
iteration linearizes it at the current iterate, which gives an inner convex
approximation, and solves the resulting QP with an exact L1 slack penalty.
Full steps are taken; there is no line search.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import ModelParams, PlannerParams, collision_bounds, discretize_dynamics
from .qp import QpProblem, polish, solve

log = logging.getLogger(__name__)

CERT_TOL = 1e-8


@dataclass(frozen=True)
class EllipseObstacle:
    t: np.ndarray
    ups: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, float).reshape(2)
        ups = np.asarray(self.ups, float)
        if ups.shape == (2,):
            ups = np.diag(ups)
        if ups.shape != (2, 2) or np.any(np.diag(ups) <= 0) or ups[0, 1] != 0 or ups[1, 0] != 0:
            raise ValueError("axis matrix must be 2x2 diagonal with positive entries")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "ups", ups)

    @property
    def semi_axes(self) -> np.ndarray:
        return np.diag(self.ups).copy()


def ellipse_params(d) -> EllipseObstacle:
    """Ellipse through the corners of the rectangle ``d = (s_f, s_b, n_l, n_r)``."""
    d = d.to_array() if hasattr(d, "to_array") else np.asarray(d, float)
    ext = np.array([d[0] - d[1], d[2] - d[3]])
    if np.any(ext <= 0):
        raise ValueError(f"degenerate rectangle {d}")
    t = 0.5 * np.array([d[0] + d[1], d[2] + d[3]])
    return EllipseObstacle(t, np.diag(ext / np.sqrt(2.0)))


def ellipse_residual(p, e: EllipseObstacle) -> tuple[float, np.ndarray]:
    """``g = ||ups^-1 (p - t)||^2`` and its gradient."""
    inv = 1.0 / np.diag(e.ups)
    r = (np.asarray(p, float) - e.t) * inv
    return float(r @ r), 2.0 * r * inv


def linearize_ellipse(p_lin, e: EllipseObstacle) -> tuple[np.ndarray, float]:
    """Halfspace ``a'p >= b`` (before slack) tangent to the level set of ``g`` at ``p_lin``."""
    p_lin = np.asarray(p_lin, float)
    g, a = ellipse_residual(p_lin, e)
    if not np.any(a):
        p_lin = p_lin + np.array([1e-6, 0.0])
        g, a = ellipse_residual(p_lin, e)
    return a, 1.0 - g + float(a @ p_lin)


def ellipse_tracks(pi: PlannerParams) -> np.ndarray:
    """Per-step ellipses of every obstacle as (N+1, J, 4) rows ``[t_s, t_n, a_s, a_n]``.

    The ellipse passes through the corners of the collision rectangle, so it
    covers every colliding configuration and stays inside the outer rectangle.
    """
    if not pi.obstacles:
        N = 0 if pi.horizon is None else pi.horizon
        return np.zeros((N + 1, 0, 4))
    D = collision_bounds(np.stack([ob.bounds for ob in pi.obstacles], axis=1))
    t = 0.5 * np.stack([D[..., 0] + D[..., 1], D[..., 2] + D[..., 3]], axis=-1)
    a = np.stack([D[..., 0] - D[..., 1], D[..., 2] - D[..., 3]], axis=-1) / np.sqrt(2.0)
    return np.concatenate([t, a], axis=-1)


def ellipse_values(X, E: np.ndarray) -> np.ndarray:
    """``g`` for every step and obstacle, shape (N+1, J)."""
    P = np.asarray(X, float)[:, None, :2]
    r = (P - E[..., :2]) / E[..., 2:]
    return np.sum(r * r, axis=-1)


def certify(X, E: np.ndarray, tol: float = CERT_TOL) -> bool:
    """Direct re-evaluation that every position lies outside every ellipse."""
    if E.shape[1] == 0:
        return True
    return bool(np.all(ellipse_values(X, E) >= 1.0 - tol))


@dataclass(frozen=True)
class FpWeights:
    Q: tuple = (1.0, 1.0, 1.0, 1.0)
    R: tuple = (1.0, 1.0)
    w_h: float = 1e6


@dataclass
class FpSolution:
    X: np.ndarray
    U: np.ndarray
    Xi: np.ndarray
    J_tr: float
    J_slack: float
    certified: bool
    iterates: list = field(default_factory=list)
    J_slack0: float = 0.0
    n_iter: int = 0
    status: str = "converged"
    wall_time: float = 0.0


class _FpQp:
    """Fixed structure of the projection QP; only the ellipse rows change."""

    def __init__(self, ref_X, ref_U, E, m: ModelParams, n_lanes: int, w: FpWeights):
        N = ref_U.shape[0]
        J = E.shape[1]
        self.N, self.J = N, J
        nx, nu = 4 * (N + 1), 2 * N
        self.nx, self.nu = nx, nu
        n = nx + nu + (N + 1) * J
        self.n = n
        q = np.tile(np.asarray(w.Q, float), N + 1)
        r = np.tile(np.asarray(w.R, float), N)
        self.h = np.concatenate([2 * q, 2 * r, np.zeros((N + 1) * J)])
        self.H = sp.diags(self.h).tocsr()
        # the QP is posed in deviations from the reference: absolute coordinates would add a
        # large constant to the tracking cost and swamp the solver's relative accuracy
        self.z_ref = np.concatenate([ref_X.ravel(), ref_U.ravel(), np.zeros((N + 1) * J)])
        self.g = np.concatenate([np.zeros(nx + nu), np.full((N + 1) * J, w.w_h)])
        A, B = discretize_dynamics(m.t_d)
        rows, cols, vals = [], [], []
        for i in range(N):
            for k in range(4):
                rr = 4 * i + k
                rows += [rr] * 7
                cols += [4 * (i + 1) + k, *range(4 * i, 4 * i + 4), nx + 2 * i, nx + 2 * i + 1]
                vals += [1.0, *(-A[k]), *(-B[k])]
        self.A_eq = sp.csr_matrix((vals, (rows, cols)), shape=(4 * N, n))
        self.b_eq = np.zeros(4 * N)
        rows, cols, vals = [], [], []
        for i in range(1, N + 1):
            rows += [2 * (i - 1)] * 2 + [2 * (i - 1) + 1] * 2
            cols += [4 * i + 3, 4 * i + 2] * 2
            vals += [1.0, -m.alpha_hi, 1.0, -m.alpha_lo]
        self.A_ratio = sp.csr_matrix((vals, (rows, cols)), shape=(2 * N, n))
        self.lo_ratio = np.tile([-np.inf, 0.0], N)
        self.up_ratio = np.tile([0.0, np.inf], N)
        lb = np.full(n, -np.inf)
        ub = np.full(n, np.inf)
        lb_x, ub_x = m.state_bounds(n_lanes)
        lb_u, ub_u = m.control_bounds(ref_X[0, 2])
        lb[4:nx] = np.tile(lb_x, N)
        ub[4:nx] = np.tile(ub_x, N)
        lb[:4] = ub[:4] = ref_X[0]
        lb[nx:nx + nu] = np.tile(lb_u, N)
        ub[nx:nx + nu] = np.tile(ub_u, N)
        lb[nx + nu:] = 0.0
        self.lb, self.ub = lb, ub
        self.E = E
        # ellipse row pattern: columns s_i, n_i, xi_ij
        steps, obs = np.meshgrid(np.arange(N + 1), np.arange(J), indexing="ij")
        self.e_steps, self.e_obs = steps.ravel(), obs.ravel()
        ne = self.e_steps.size
        self.e_cols = np.stack([4 * self.e_steps, 4 * self.e_steps + 1,
                                nx + nu + self.e_steps * J + self.e_obs], axis=1)
        self.e_rows = np.repeat(np.arange(ne), 3)

    def problem(self, X_lin) -> QpProblem:
        ne = self.e_steps.size
        if ne:
            P = X_lin[self.e_steps, :2]
            Ee = self.E[self.e_steps, self.e_obs]
            inv = 1.0 / Ee[:, 2:]
            r = (P - Ee[:, :2]) * inv
            a = 2.0 * r * inv
            zero = ~np.any(a, axis=1)
            if np.any(zero):
                P = P.copy()
                P[zero, 0] += 1e-6
                r = (P - Ee[:, :2]) * inv
                a = 2.0 * r * inv
            gval = np.sum(r * r, axis=1)
            b = 1.0 - gval + np.sum(a * P, axis=1)
            vals = np.column_stack([a, np.ones(ne)]).ravel()
            A_e = sp.csr_matrix((vals, (self.e_rows, self.e_cols.ravel())), shape=(ne, self.n))
            A_in = sp.vstack([self.A_ratio, A_e], format="csr")
            lo = np.concatenate([self.lo_ratio, b])
            up = np.concatenate([self.up_ratio, np.full(ne, np.inf)])
        else:
            A_in, lo, up = self.A_ratio, self.lo_ratio, self.up_ratio
        z = self.z_ref
        Az = A_in @ z
        return QpProblem(self.H, self.g, self.A_eq, self.b_eq - self.A_eq @ z, A_in, lo - Az, up - Az,
                         self.lb - z, self.ub - z)

    def split(self, dz):
        N, J = self.N, self.J
        x = dz + self.z_ref
        X = x[:self.nx].reshape(N + 1, 4)
        U = x[self.nx:self.nx + self.nu].reshape(N, 2)
        Xi = np.maximum(x[self.nx + self.nu:].reshape(N + 1, J), 0.0)
        return X, U, Xi

    def tracking(self, X, U) -> float:
        dz = np.concatenate([X.ravel(), U.ravel()]) - self.z_ref[:self.nx + self.nu]
        return float(0.5 * self.h[:dz.size] @ dz ** 2)


def sqp_project(ref_X, ref_U, E: np.ndarray, m: ModelParams, n_lanes: int,
                w: FpWeights | None = None, *, max_iter: int = 10, step_tol: float = 1e-6,
                backend: str = "clarabel") -> FpSolution:
    """Project the reference ``(ref_X, ref_U)`` out of the ellipses ``E``.

    ``E`` comes from :func:`ellipse_tracks`. The iteration starts at the
    reference and stops when the step's max-norm drops below ``step_tol`` or
    after ``max_iter`` QPs. A failing subproblem ends the iteration with the
    last iterate, which is then uncertified.
    """
    w = w or FpWeights()
    t0 = time.perf_counter()
    ref_X = np.asarray(ref_X, float)
    ref_U = np.asarray(ref_U, float)
    N = ref_U.shape[0]
    if ref_X.shape != (N + 1, 4) or ref_U.shape != (N, 2):
        raise ValueError(f"reference shapes X {ref_X.shape}, U {ref_U.shape} do not match a horizon")
    E = np.asarray(E, float)
    if E.ndim != 3 or E.shape[0] != N + 1 or E.shape[2] != 4:
        raise ValueError(f"ellipse tracks have shape {E.shape}, expected ({N + 1}, J, 4)")
    fq = _FpQp(ref_X, ref_U, E, m, n_lanes, w)
    Xi0 = np.maximum(1.0 - ellipse_values(ref_X, E), 0.0) if E.shape[1] else np.zeros((N + 1, 0))
    J_slack0 = float(w.w_h * Xi0.sum())
    X, U, Xi = ref_X.copy(), ref_U.copy(), Xi0
    iterates: list = []
    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        p = fq.problem(X)
        sol = solve(p, backend)
        if sol.ok:
            sol = polish(p, sol)
        if not sol.ok:
            log.debug("projection subproblem failed at iteration %d: %s", it, sol.status)
            status = "qp_failed"
            it -= 1
            break
        Xn, Un, Xi = fq.split(sol.x)
        step = max(np.abs(Xn - X).max(initial=0.0), np.abs(Un - U).max(initial=0.0))
        X, U = Xn, Un
        iterates.append((fq.tracking(X, U), float(w.w_h * Xi.sum())))
        if step < step_tol:
            status = "converged"
            break
    J_tr = fq.tracking(X, U)
    J_slack = float(w.w_h * Xi.sum())
    ok = status != "qp_failed"
    cert = ok and float(Xi.max(initial=0.0)) <= CERT_TOL and certify(X, E)
    return FpSolution(X, U, Xi, J_tr, J_slack, bool(cert), iterates, J_slack0, it, status,
                      time.perf_counter() - t0)


def project_plan(pi: PlannerParams, X, U, m: ModelParams, w: FpWeights | None = None,
                 **kw) -> FpSolution:
    """Convenience wrapper building the ellipse tracks of ``pi``."""
    E = ellipse_tracks(pi)
    if E.shape[0] != np.asarray(U).shape[0] + 1:
        E = np.zeros((np.asarray(U).shape[0] + 1, 0, 4))
    return sqp_project(X, U, E, m, pi.n_lanes, w, **kw)
