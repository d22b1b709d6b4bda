"""Fixed-binary QP that scores a predicted binary assignment.

Binaries are fixed to the prediction, the slack upper bound is removed and
the lane reference follows the predicted lane changes without the road
limits on it, so the problem stays feasible for any prediction. Slack
beyond one is priced linearly on top of the quadratic slack cost, so the
trajectory clears every outer rectangle whenever the prediction allows it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .miqp import BinaryAssignment, MiqpInstance
from .qp import QpProblem, polish, solve

SLACK_TOL = 1e-6
# linear price per unit of slack beyond one; large enough to act as an exact
# penalty, so a prediction that admits sigma <= 1 is never scored above it
EXCESS_PRICE = 1e6


@dataclass
class SoftQpSolution:
    X: np.ndarray
    U: np.ndarray
    Sigma: np.ndarray
    ref_lane: np.ndarray
    objective: float
    feasible: bool
    max_slack: float
    status: str
    wall_time: float = 0.0

    @property
    def any_slack(self) -> bool:
        """True when some slack is positive (margin touched), a weaker notion than infeasible."""
        return bool(self.Sigma.size) and self.max_slack > SLACK_TOL

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def soft_problem(inst: MiqpInstance, pred: BinaryAssignment,
                 excess_price: float = EXCESS_PRICE) -> QpProblem:
    """Fixed-binary QP over ``[z, e]`` where ``e >= sigma - 1`` is the slack excess.

    ``z`` is the instance's variable vector. The excess carries the linear
    price ``excess_price`` on top of the unchanged quadratic slack cost.
    """
    lb, ub = inst.fixed_bounds(pred, slack_ub=np.inf)
    L = inst.layout
    lb[L.nbar[1:]] = -np.inf
    ub[L.nbar[1:]] = np.inf
    base = inst.node_problem(lb, ub)
    n, k = base.g.size, L.sig.size
    sig = L.sig.ravel()
    E = sp.csr_matrix((np.r_[np.ones(k), -np.ones(k)],
                       (np.r_[np.arange(k), np.arange(k)], np.r_[sig, n + np.arange(k)])),
                      shape=(k, n + k))
    pad = lambda A: sp.hstack([A, sp.csr_matrix((A.shape[0], k))], format="csr")
    return QpProblem(sp.block_diag([base.H, sp.csr_matrix((k, k))], format="csr"),
                     np.r_[base.g, np.full(k, excess_price)],
                     pad(base.A_eq), base.b_eq,
                     sp.vstack([pad(base.A_in), E], format="csr"),
                     np.r_[base.lb_in, np.full(k, -np.inf)], np.r_[base.ub_in, np.ones(k)],
                     np.r_[base.lb, np.zeros(k)], np.r_[base.ub, np.full(k, np.inf)])


def solve_soft_qp(inst: MiqpInstance, pred: BinaryAssignment, *, slack_tol: float = SLACK_TOL,
                  backend: str = "clarabel", do_polish: bool = True) -> SoftQpSolution:
    """Minimum cost trajectory for the fixed binaries ``pred``.

    A solver failure yields ``status != "optimal"``, infinite cost and
    ``feasible=False`` so callers can reject the candidate.
    """
    if pred.N != inst.N or pred.n_obs != inst.n_obs:
        raise ValueError(f"prediction shape (N={pred.N}, n_obs={pred.n_obs}) does not match "
                         f"instance (N={inst.N}, n_obs={inst.n_obs})")
    pred.validate()
    t0 = time.perf_counter()
    p = soft_problem(inst, pred)
    sol = solve(p, backend)
    if do_polish and sol.ok:
        sol = polish(p, sol)
    dt = time.perf_counter() - t0
    N, J = inst.N, inst.n_obs
    if not sol.ok:
        nan = np.nan
        return SoftQpSolution(np.full((N + 1, 4), nan), np.full((N, 2), nan),
                              np.full((N + 1, J), nan), np.full(N + 1, nan), np.inf, False,
                              np.inf, sol.status, dt)
    z = sol.x[:inst.n_variables]
    X, U, nbar, _, _, S = inst.split(z)
    S = np.maximum(S, 0.0)
    max_slack = float(S.max(initial=0.0))
    return SoftQpSolution(X, U, S, nbar, float(sol.objective + inst.const),
                          max_slack <= 1.0 + slack_tol, max_slack, "optimal", dt)


def suboptimality(J_s: float, J_e: float) -> float:
    """Relative cost excess ``(J_s - J_e) / J_e``."""
    if not J_e > 0:
        raise ValueError(f"suboptimality needs a positive expert cost, got {J_e}")
    return (J_s - J_e) / J_e
