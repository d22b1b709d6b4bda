"""Independent reference computations used by several test modules."""

from __future__ import annotations

import itertools
import math

import numpy as np

from redsplan.core import ModelParams, PlannerParams, region_halfspaces
from redsplan.miqp import BinaryAssignment, MiqpWeights, build_miqp, solve_fixed

REGION_KEYS = ("f", "b", "l", "r")


def outer_position_box(pi: PlannerParams, m: ModelParams):
    """Superset of the positions reachable at each step: (lo, hi), each (N+1, 2)."""
    lb_u, ub_u = m.control_bounds(pi.x0.v_s)
    lb_x, ub_x = m.state_bounds(pi.n_lanes)
    t = np.arange(m.N + 1) * m.t_d
    x0 = pi.x0.to_array()
    lo = x0[:2] + np.outer(t, x0[2:]) + 0.5 * np.outer(t**2, lb_u)
    hi = x0[:2] + np.outer(t, x0[2:]) + 0.5 * np.outer(t**2, ub_u)
    lo[1:, 1] = np.maximum(lo[1:, 1], lb_x[1])
    hi[1:, 1] = np.minimum(hi[1:, 1], ub_x[1])
    return lo, hi


def region_meets_box(d, k: str, lo, hi) -> bool:
    """Whether the closed region ``k`` of rectangle ``d`` intersects the box [lo, hi]."""
    A, b = region_halfspaces(d, k)
    # each row involves one coordinate, so the box meets the region iff every row can hold
    for a, bb in zip(A, b):
        val = np.where(a > 0, a * lo, a * hi).sum()
        if val > bb + 1e-9:
            return False
    # rows on the same coordinate must be jointly satisfiable
    s_lo, s_hi = lo[0], hi[0]
    n_lo, n_hi = lo[1], hi[1]
    for a, bb in zip(A, b):
        if a[0] > 0:
            s_hi = min(s_hi, bb / a[0])
        elif a[0] < 0:
            s_lo = max(s_lo, bb / a[0])
        if a[1] > 0:
            n_hi = min(n_hi, bb / a[1])
        elif a[1] < 0:
            n_lo = max(n_lo, bb / a[1])
    return s_lo <= s_hi + 1e-9 and n_lo <= n_hi + 1e-9


def step0_slack(p0, d, k: str, margin: float) -> float:
    """Smallest slack with which region ``k`` holds at the fixed initial position."""
    A, b = region_halfspaces(d, k)
    viol = A @ p0 - b  # need viol <= (sigma - 1) * margin
    need = 0.0
    for v in viol:
        if margin > 0:
            need = max(need, 1.0 + v / margin)
        elif v > 1e-12:
            return math.inf
    return need


def enumerate_miqp(pi: PlannerParams, w: MiqpWeights, m: ModelParams, backend: str = "ipm"):
    """Optimal objective and binaries by trying every assignment (single obstacle at most).

    Assignments that are infeasible for a reason checked directly are
    skipped: a lane reference leaving the road, or a region that misses
    the outer reachable box at its step. The step-0 region only affects
    the step-0 slack (the initial position is fixed), so it is chosen by
    a direct computation and enters the objective additively.
    """
    if pi.n_obs > 1:
        raise ValueError("the enumeration oracle handles at most one obstacle")
    inst = build_miqp(pi, w, m)
    N = m.N
    top = m.lane_center(pi.n_lanes - 1)
    lanes = []
    for seq in itertools.product(range(3), repeat=N):
        steps = np.array([{0: 1, 1: -1, 2: 0}[c] for c in seq]) * m.d_lane
        ref = pi.lane0_ref + np.concatenate([[0.0], np.cumsum(steps)])
        if np.all(ref >= -1e-9) and np.all(ref <= top + 1e-9):
            lanes.append(seq)
    if pi.n_obs == 0:
        regions = [np.zeros((N + 1, 0), int)]
    else:
        bounds = pi.obstacles[0].bounds
        lo, hi = outer_position_box(pi, m)
        p0 = pi.x0.to_array()[:2]
        s0 = [step0_slack(p0, bounds[0], k, w.sigma_bar[c]) for c, k in enumerate(REGION_KEYS)]
        s0 = [s if s <= 1.0 + 1e-12 else math.inf for s in s0]
        k0 = int(np.argmin(s0))
        if not math.isfinite(s0[k0]):
            return math.inf, None
        per_step = [[c for c, k in enumerate(REGION_KEYS) if region_meets_box(bounds[i], k, lo[i], hi[i])]
                    for i in range(1, N + 1)]
        regions = [np.array((k0,) + combo).reshape(N + 1, 1)
                   for combo in itertools.product(*per_step)]
    best, arg = math.inf, None
    for seq in lanes:
        for reg in regions:
            b = BinaryAssignment.from_classes(np.array(seq), reg)
            sol = solve_fixed(inst, b, backend=backend)
            if sol.ok and sol.objective + inst.const < best:
                best, arg = sol.objective + inst.const, b
    return best, arg
