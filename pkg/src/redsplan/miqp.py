"""Mixed-integer expert planner: MIQP assembly and branch-and-bound.

Decision variables per instance with horizon ``N`` and ``J`` obstacles:

* ``X`` states (N+1, 4), ``U`` controls (N, 2)
* ``nbar`` lateral lane reference (N+1,)
* ``Lambda`` lane-change binaries (N, 2) as (up, down)
* ``Gamma`` region binaries (N+1, J, 4) in (f, b, l, r) order
* ``Sigma`` margin slacks (N+1, J)

Region ``k`` of obstacle ``j`` at step ``i`` reads, for every row of ``k``::

    a' p_i <= b + (1 - gamma_k) M + (sigma - 1) sigma_bar_k

so ``sigma = 0`` keeps the full safety margin and ``sigma = 1`` only keeps the
vehicle outside the rectangle.
"""

from __future__ import annotations

import heapq
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import (
    N_REGIONS,
    ROW_REGION,
    ModelParams,
    PlannerParams,
    discretize_dynamics,
    region_rows,
)
from .qp import QpProblem, QpSolution, polish, solve

log = logging.getLogger(__name__)

INT_TOL = 1e-6


@dataclass(frozen=True)
class MiqpWeights:
    Q: tuple = (0.0, 14.0, 10.0, 1.0)
    R: tuple = (4.0, 0.5)
    w_lc: float = 3000.0
    w_rght: float = 3.0
    w_dst: float = 1000.0
    sigma_bar: tuple = (0.5, 12.0, 0.5, 0.5)
    # None selects a per-row M from the reachable box
    bigM: float | None = None

    def __post_init__(self):
        for name in ("w_lc", "w_rght", "w_dst"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if np.any(np.asarray(self.sigma_bar) < 0):
            raise ValueError("sigma_bar must be non-negative")
        if self.bigM is not None and not self.bigM > 0:
            raise ValueError("bigM must be positive")
        for name, size in (("Q", 4), ("R", 2)):
            M = self.matrix(name)
            if M.shape != (size, size):
                raise ValueError(f"{name} must be {size}x{size} or a diagonal of length {size}")
            if np.linalg.eigvalsh(0.5 * (M + M.T)).min() < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")

    def matrix(self, name: str) -> np.ndarray:
        M = np.asarray(getattr(self, name), dtype=float)
        return np.diag(M) if M.ndim == 1 else M


@dataclass
class BinaryAssignment:
    """Lane-change matrix ``Lambda`` (N, 2) and region tensor ``Gamma`` (N+1, J, 4)."""

    Lambda: np.ndarray
    Gamma: np.ndarray

    def __post_init__(self):
        self.Lambda = np.asarray(self.Lambda, dtype=np.int8).reshape(-1, 2)
        G = np.asarray(self.Gamma, dtype=np.int8)
        if G.size == 0:
            G = G.reshape(self.Lambda.shape[0] + 1, 0, N_REGIONS)
        self.Gamma = G
        if G.ndim != 3 or G.shape[2] != N_REGIONS or G.shape[0] != self.Lambda.shape[0] + 1:
            raise ValueError(f"Gamma shape {G.shape} incompatible with Lambda {self.Lambda.shape}")

    @property
    def N(self) -> int:
        return self.Lambda.shape[0]

    @property
    def n_obs(self) -> int:
        return self.Gamma.shape[1]

    def validate(self) -> "BinaryAssignment":
        if not np.all(np.isin(self.Lambda, (0, 1))) or not np.all(np.isin(self.Gamma, (0, 1))):
            raise ValueError("binary assignment contains non-binary entries")
        if np.any(self.Gamma.sum(axis=2) != 1):
            raise ValueError("every region group must be one-hot")
        if np.any(self.Lambda.sum(axis=1) > 1):
            raise ValueError("lane change up and down in the same step")
        return self

    @property
    def lane_classes(self) -> np.ndarray:
        """Per-step class index: 0 up, 1 down, 2 none."""
        return np.where(self.Lambda[:, 0] == 1, 0, np.where(self.Lambda[:, 1] == 1, 1, 2))

    @property
    def region_classes(self) -> np.ndarray:
        return self.Gamma.argmax(axis=2) if self.n_obs else np.zeros((self.N + 1, 0), int)

    @classmethod
    def from_classes(cls, lane: np.ndarray, region: np.ndarray) -> "BinaryAssignment":
        lane = np.asarray(lane, dtype=int)
        region = np.asarray(region, dtype=int).reshape(lane.size + 1, -1)
        Lam = np.zeros((lane.size, 2), np.int8)
        Lam[lane == 0, 0] = 1
        Lam[lane == 1, 1] = 1
        Gam = np.zeros(region.shape + (N_REGIONS,), np.int8)
        if region.size:
            np.put_along_axis(Gam, region[..., None], 1, axis=2)
        return cls(Lam, Gam)

    def permuted(self, order) -> "BinaryAssignment":
        return BinaryAssignment(self.Lambda.copy(), self.Gamma[:, list(order), :])

    def __eq__(self, other):
        if not isinstance(other, BinaryAssignment):
            return NotImplemented
        return (np.array_equal(self.Lambda, other.Lambda)
                and np.array_equal(self.Gamma, other.Gamma))

    def to_dict(self) -> dict:
        return {"Lambda": self.Lambda.tolist(), "Gamma": self.Gamma.tolist()}

    @classmethod
    def from_dict(cls, d: dict, N: int | None = None) -> "BinaryAssignment":
        Lam = np.asarray(d["Lambda"], dtype=np.int8).reshape(-1, 2)
        G = np.asarray(d["Gamma"], dtype=np.int8)
        if G.size == 0:
            G = G.reshape(Lam.shape[0] + 1, 0, N_REGIONS)
        return cls(Lam, G)


@dataclass
class MiqpSolution:
    X: np.ndarray
    U: np.ndarray
    Sigma: np.ndarray
    ref_lane: np.ndarray
    binaries: BinaryAssignment | None
    objective: float
    status: str
    node_count: int = 0
    wall_time: float = 0.0
    lower_bound: float = -np.inf
    history: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "node_limit", "time_limit") and self.binaries is not None

    @property
    def gap(self) -> float:
        return self.objective - self.lower_bound


class _Layout:
    """Index bookkeeping for the flat variable vector."""

    def __init__(self, N: int, J: int):
        self.N, self.J = N, J
        off = 0

        def take(shape):
            nonlocal off
            size = int(np.prod(shape))
            idx = np.arange(off, off + size).reshape(shape)
            off += size
            return idx

        self.x = take((N + 1, 4))
        self.u = take((N, 2))
        self.nbar = take((N + 1,))
        self.lam = take((N, 2))
        self.gam = take((N + 1, J, N_REGIONS))
        self.sig = take((N + 1, J))
        self.n = off
        self.binary = np.concatenate([self.lam.ravel(), self.gam.ravel()])


@dataclass
class MiqpInstance:
    """Assembled MIQP with binaries relaxed to ``[0, 1]`` in ``qp``."""

    params: PlannerParams
    weights: MiqpWeights
    model: ModelParams
    layout: _Layout
    qp: QpProblem
    const: float
    # big-M rows: (row index in A_in, step, obstacle, region)
    row_step: np.ndarray
    row_obs: np.ndarray
    row_region: np.ndarray
    n_base_rows: int
    region_A: np.ndarray
    region_b: np.ndarray
    sig_rows: np.ndarray
    reach_lo: np.ndarray
    reach_hi: np.ndarray
    lb0: np.ndarray
    ub0: np.ndarray
    infeasible_reason: str | None = None

    @property
    def N(self) -> int:
        return self.layout.N

    @property
    def n_obs(self) -> int:
        return self.layout.J

    @property
    def n_binaries(self) -> int:
        return self.layout.binary.size

    @property
    def n_variables(self) -> int:
        return self.layout.n

    def node_problem(self, lb, ub) -> QpProblem:
        """Relaxation with binary bounds ``lb``/``ub``; rows of disabled regions are dropped."""
        q = self.qp
        off = self.layout.gam[self.row_step, self.row_obs, self.row_region]
        keep = np.concatenate([np.arange(self.n_base_rows),
                               self.n_base_rows + np.flatnonzero(ub[off] > 0.5)])
        return QpProblem(q.H, q.g, q.A_eq, q.b_eq, q.A_in[keep], q.lb_in[keep], q.ub_in[keep],
                         lb, ub)

    def fixed_bounds(self, b: BinaryAssignment, slack_ub: float = 1.0):
        """Variable bounds with every binary fixed to ``b``."""
        L = self.layout
        lb, ub = self.lb0.copy(), self.ub0.copy()
        lb[L.lam] = ub[L.lam] = b.Lambda
        lb[L.gam] = ub[L.gam] = b.Gamma
        ub[L.sig] = slack_ub
        return lb, ub

    def split(self, x: np.ndarray):
        L = self.layout
        return (x[L.x], x[L.u], x[L.nbar], x[L.lam], x[L.gam], x[L.sig])

    def evaluate_cost(self, X, U, nbar, Lambda, Sigma) -> dict:
        """Cost components of a (possibly non-optimal) trajectory."""
        return cost_terms(X, U, nbar, Lambda, Sigma, self.params, self.weights, self.model)


def cost_terms(X, U, nbar, Lambda, Sigma, pi: PlannerParams, w: MiqpWeights,
               m: ModelParams) -> dict:
    X = np.asarray(X, float)
    U = np.asarray(U, float)
    Q, R = w.matrix("Q"), w.matrix("R")
    N = U.shape[0]
    ref = np.zeros_like(X)
    ref[:, 0] = pi.x0.s + np.arange(N + 1) * m.t_d * pi.v_ref
    ref[:, 1] = nbar
    ref[:, 2] = pi.v_ref
    E = X - ref
    road_lo = m.road_limits(pi.n_lanes)[0]
    out = {
        "state": float(np.einsum("ij,jk,ik->", E, Q, E)),
        "control": float(np.einsum("ij,jk,ik->", U, R, U)),
        "lane_change": float(w.w_lc * np.sum(Lambda)),
        "right": float(w.w_rght * np.sum(X[:, 1] - road_lo)),
        "slack": float(w.w_dst * np.sum(np.asarray(Sigma, float) ** 2)),
    }
    out["total"] = sum(out.values())
    return out


def reachable_box(pi: PlannerParams, m: ModelParams, N: int):
    """Interval hull of reachable positions ``(lo, hi)``, each (N+1, 2)."""
    lb_u, ub_u = m.control_bounds(pi.x0.v_s)
    lb_x, ub_x = m.state_bounds(pi.n_lanes)
    t = m.t_d
    lo = np.empty((N + 1, 4))
    hi = np.empty((N + 1, 4))
    lo[0] = hi[0] = pi.x0.to_array()
    for i in range(N):
        for pos, vel, k in ((0, 2, 0), (1, 3, 1)):
            v_lo = max(lo[i, vel] + lb_u[k] * t, lb_x[vel])
            v_hi = min(hi[i, vel] + ub_u[k] * t, ub_x[vel])
            if vel == 3:
                # lateral speed is also capped by the velocity-ratio constraint
                v_lo = max(v_lo, min(m.alpha_lo * hi[i + 1, 2], m.alpha_lo * lo[i + 1, 2]))
                v_hi = min(v_hi, max(m.alpha_hi * hi[i + 1, 2], m.alpha_hi * lo[i + 1, 2]))
            v_lo, v_hi = min(v_lo, v_hi), max(v_lo, v_hi)
            lo[i + 1, vel], hi[i + 1, vel] = v_lo, v_hi
            # exact for the double integrator: displacement is the mean velocity times t
            lo[i + 1, pos] = max(lo[i, pos] + 0.5 * t * (lo[i, vel] + v_lo), lb_x[pos])
            hi[i + 1, pos] = min(hi[i, pos] + 0.5 * t * (hi[i, vel] + v_hi), ub_x[pos])
            if lo[i + 1, pos] > hi[i + 1, pos]:
                mid = 0.5 * (lo[i + 1, pos] + hi[i + 1, pos])
                lo[i + 1, pos] = hi[i + 1, pos] = mid
    return lo[:, :2], hi[:, :2]


def build_miqp(pi: PlannerParams, w: MiqpWeights, m: ModelParams) -> MiqpInstance:
    """Assemble the parametric MIQP for ``pi``; see the module docstring for the layout."""
    N = m.N
    for ob in pi.obstacles:
        if ob.horizon != N:
            raise ValueError(f"obstacle track has horizon {ob.horizon}, model expects {N}")
    if not 1 <= pi.n_lanes <= m.n_lanes_max:
        raise ValueError(f"n_lanes={pi.n_lanes} outside [1, {m.n_lanes_max}]")
    J = pi.n_obs
    L = _Layout(N, J)
    n = L.n
    A, B = discretize_dynamics(m.t_d)
    Q, R = w.matrix("Q"), w.matrix("R")

    # cost: per step (x_i - xbar_i)' Q (x_i - xbar_i) with xbar_i = c_i + nbar_i e_n
    Hr, Hc, Hv = [], [], []
    g = np.zeros(n)
    const = 0.0
    road_lo = m.road_limits(pi.n_lanes)[0]
    Mmap = np.hstack([np.eye(4), -np.eye(4)[:, [1]]])
    Hblk = Mmap.T @ Q @ Mmap
    for i in range(N + 1):
        idx = np.concatenate([L.x[i], [L.nbar[i]]])
        c = np.array([pi.x0.s + i * m.t_d * pi.v_ref, 0.0, pi.v_ref, 0.0])
        rr, cc = np.meshgrid(idx, idx, indexing="ij")
        Hr.append(rr.ravel()); Hc.append(cc.ravel()); Hv.append(2.0 * Hblk.ravel())
        g[idx] += -2.0 * Mmap.T @ Q @ c
        const += float(c @ Q @ c)
        g[L.x[i, 1]] += w.w_rght
        const -= w.w_rght * road_lo
    for i in range(N):
        rr, cc = np.meshgrid(L.u[i], L.u[i], indexing="ij")
        Hr.append(rr.ravel()); Hc.append(cc.ravel()); Hv.append(2.0 * R.ravel())
    g[L.lam.ravel()] += w.w_lc
    Hr.append(L.sig.ravel()); Hc.append(L.sig.ravel()); Hv.append(np.full(L.sig.size, 2.0 * w.w_dst))
    H = sp.csr_matrix((np.concatenate(Hv), (np.concatenate(Hr), np.concatenate(Hc))), shape=(n, n))
    H = 0.5 * (H + H.T)

    # equalities: dynamics, lane-reference recursion, one region per group
    er, ec, ev, eb = [], [], [], []
    row = 0
    for i in range(N):
        for r in range(4):
            er += [row] * (1 + 4 + 2)
            ec += [L.x[i + 1, r], *L.x[i], *L.u[i]]
            ev += [1.0, *(-A[r]), *(-B[r])]
            eb.append(0.0)
            row += 1
    for i in range(N):
        er += [row] * 4
        ec += [L.nbar[i + 1], L.nbar[i], L.lam[i, 0], L.lam[i, 1]]
        ev += [1.0, -1.0, -m.d_lane, m.d_lane]
        eb.append(0.0)
        row += 1
    for i in range(N + 1):
        for j in range(J):
            er += [row] * N_REGIONS
            ec += list(L.gam[i, j])
            ev += [1.0] * N_REGIONS
            eb.append(1.0)
            row += 1
    A_eq = sp.csr_matrix((ev, (er, ec)), shape=(row, n))
    b_eq = np.array(eb)

    # inequalities: velocity ratio, single lane change per step, big-M regions
    ir, ic, iv, ilo, iup = [], [], [], [], []
    row = 0
    for i in range(1, N + 1):
        ir += [row, row, row + 1, row + 1]
        ic += [L.x[i, 3], L.x[i, 2], L.x[i, 3], L.x[i, 2]]
        iv += [1.0, -m.alpha_hi, 1.0, -m.alpha_lo]
        ilo += [-np.inf, 0.0]
        iup += [0.0, np.inf]
        row += 2
    for i in range(N):
        ir += [row, row]
        ic += [L.lam[i, 0], L.lam[i, 1]]
        iv += [1.0, 1.0]
        ilo.append(-np.inf)
        iup.append(1.0)
        row += 1
    n_base = row

    reach_lo, reach_hi = reachable_box(pi, m, N)
    if J:
        D = np.stack([ob.bounds for ob in pi.obstacles], axis=1)  # (N+1, J, 4)
    else:
        D = np.zeros((N + 1, 0, 4))
    RA, Rb, sig_rows = region_rows(D, w.sigma_bar)  # RA (8,2), Rb (N+1,J,8)
    # sup and inf of a'p - b over the reachable box
    Apos, Aneg = np.maximum(RA, 0), np.minimum(RA, 0)
    sup = (reach_hi @ Apos.T + reach_lo @ Aneg.T)[:, None, :] - Rb
    inf = (reach_lo @ Apos.T + reach_hi @ Aneg.T)[:, None, :] - Rb
    if w.bigM is None:
        Mrow = np.maximum(sup + sig_rows, 0.0) + 1.0
    else:
        Mrow = np.full_like(sup, w.bigM)
    steps, obs, rws = np.meshgrid(np.arange(N + 1), np.arange(J), np.arange(8), indexing="ij")
    steps, obs, rws = steps.ravel(), obs.ravel(), rws.ravel()
    k = ROW_REGION[rws]
    nr = steps.size
    rows = row + np.arange(nr)
    Mv = Mrow.ravel()
    sv = sig_rows[rws]
    ir += list(np.repeat(rows, 4))
    ic += list(np.stack([L.x[steps, 0], L.x[steps, 1], L.gam[steps, obs, k], L.sig[steps, obs]],
                        axis=1).ravel())
    iv += list(np.stack([RA[rws, 0], RA[rws, 1], Mv, -sv], axis=1).ravel())
    ilo += [-np.inf] * nr
    iup += list(Rb.ravel() + Mv - sv)
    row += nr
    A_in = sp.csr_matrix((iv, (ir, ic)), shape=(row, n))
    A_in.eliminate_zeros()

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    lb_u, ub_u = m.control_bounds(pi.x0.v_s)
    lb[L.u] = lb_u
    ub[L.u] = ub_u
    lb_x, ub_x = m.state_bounds(pi.n_lanes)
    lb[L.x[1:]] = lb_x
    ub[L.x[1:]] = ub_x
    lb[L.x[0]] = ub[L.x[0]] = pi.x0.to_array()
    lb[L.nbar] = 0.0
    ub[L.nbar] = m.lane_center(pi.n_lanes - 1)
    lb[L.nbar[0]] = ub[L.nbar[0]] = pi.lane0_ref
    lb[L.binary] = 0.0
    ub[L.binary] = 1.0
    lb[L.sig] = 0.0
    ub[L.sig] = 1.0

    reason = None
    if not (-1e-9 <= pi.lane0_ref <= m.lane_center(pi.n_lanes - 1) + 1e-9):
        reason = "initial lane reference outside the road"

    # presolve on region groups using the reachable box
    if J:
        big = 1e300
        need_sig1 = np.full((N + 1, J, N_REGIONS), -big)
        need_sig0 = np.full((N + 1, J, N_REGIONS), -big)
        for r in range(8):
            kk = ROW_REGION[r]
            need_sig1[:, :, kk] = np.maximum(need_sig1[:, :, kk], inf[:, :, r])
            need_sig0[:, :, kk] = np.maximum(need_sig0[:, :, kk], sup[:, :, r] + sig_rows[r])
        forbidden = need_sig1 > 1e-9
        free_region = need_sig0 <= 0.0
        gam_ub = np.where(forbidden, 0.0, 1.0)
        if np.any(forbidden.all(axis=2)):
            reason = "an obstacle covers every reachable position"
        dom = free_region & ~forbidden
        has_dom = dom.any(axis=2)
        first = np.argmax(dom, axis=2)
        sel = np.zeros_like(gam_ub)
        np.put_along_axis(sel, first[..., None], 1.0, axis=2)
        gam_lb = np.where(has_dom[..., None], sel, 0.0)
        gam_ub = np.where(has_dom[..., None], sel, gam_ub)
        lb[L.gam] = gam_lb
        ub[L.gam] = gam_ub
        ub[L.sig] = np.where(has_dom, 0.0, 1.0)
        # a region that is the last one left is fixed as well
        single = (gam_ub.sum(axis=2) == 1)
        lb[L.gam] = np.where(single[..., None], gam_ub, lb[L.gam])

    qp = QpProblem(H, g, A_eq, b_eq, A_in, np.array(ilo), np.array(iup), lb, ub)
    return MiqpInstance(
        params=pi, weights=w, model=m, layout=L, qp=qp, const=const,
        row_step=steps, row_obs=obs, row_region=k, n_base_rows=n_base,
        region_A=RA, region_b=Rb, sig_rows=sig_rows,
        reach_lo=reach_lo, reach_hi=reach_hi, lb0=lb, ub0=ub,
        infeasible_reason=reason,
    )


# -- branching ------------------------------------------------------------


@dataclass
class Branch:
    kind: str  # "gamma" or "lambda"
    step: int
    obstacle: int
    values: np.ndarray


def _entropy(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0)
    return h.sum(axis=-1)


def branch_select(gamma: np.ndarray, lam: np.ndarray, tol: float = INT_TOL) -> Branch:
    """Pick the most fractional group by entropy.

    ``gamma`` has shape (N+1, J, 4) and ``lam`` (N, 2). Lane groups carry a
    third member, "none" = 1 - up - down. Ties prefer region groups, then
    the earlier step, then the lower obstacle index.
    """
    gamma = np.asarray(gamma, float)
    lam = np.asarray(lam, float)
    lam3 = np.concatenate([lam, 1.0 - lam.sum(axis=1, keepdims=True)], axis=1)
    g_frac = np.any(np.minimum(np.abs(gamma), np.abs(gamma - 1)) > tol, axis=-1)
    l_frac = np.any(np.minimum(np.abs(lam3), np.abs(lam3 - 1)) > tol, axis=-1)
    best, choice = -1.0, None
    if gamma.size:
        hg = np.where(g_frac, _entropy(gamma), -1.0)
        i, j = np.unravel_index(int(np.argmax(hg)), hg.shape)
        if g_frac[i, j]:
            best, choice = hg[i, j], Branch("gamma", int(i), int(j), gamma[i, j].copy())
    if lam3.size:
        hl = np.where(l_frac, _entropy(lam3), -1.0)
        i = int(np.argmax(hl))
        if l_frac[i] and hl[i] > best + 1e-12:
            choice = Branch("lambda", i, -1, lam3[i].copy())
    if choice is None:
        raise ValueError("all binaries are integral; nothing to branch on")
    return choice


def _children(inst: MiqpInstance, br: Branch, lb, ub):
    """Child bound pairs, most promising first (largest relaxed value, then order)."""
    L = inst.layout
    order = sorted(range(br.values.size), key=lambda c: (-br.values[c], c))
    out = []
    for c in order:
        clb, cub = lb.copy(), ub.copy()
        if br.kind == "gamma":
            idx = L.gam[br.step, br.obstacle]
            if ub[idx[c]] < 0.5:
                continue
            clb[idx] = 0.0
            cub[idx] = 0.0
            clb[idx[c]] = cub[idx[c]] = 1.0
        else:
            idx = L.lam[br.step]
            clb[idx] = cub[idx] = 0.0
            if c < 2:
                if ub[idx[c]] < 0.5:
                    continue
                clb[idx[c]] = cub[idx[c]] = 1.0
            elif lb[idx].max() > 0.5:
                continue
        out.append((c, clb, cub))
    return out


def _is_integral(x, inst: MiqpInstance, tol=INT_TOL) -> bool:
    v = x[inst.layout.binary]
    return bool(np.all(np.minimum(np.abs(v), np.abs(v - 1)) <= tol))


def _round(inst: MiqpInstance, x) -> BinaryAssignment:
    L = inst.layout
    lam = x[L.lam]
    lam3 = np.concatenate([lam, 1 - lam.sum(axis=1, keepdims=True)], axis=1)
    gam = x[L.gam]
    region = gam.argmax(axis=2) if inst.n_obs else np.zeros((inst.N + 1, 0), int)
    return BinaryAssignment.from_classes(lam3.argmax(axis=1), region)


def canonical_regions(inst: MiqpInstance, X: np.ndarray, tol: float = 1e-7) -> np.ndarray:
    """Region per (step, obstacle) needing the least slack at positions ``X``.

    Ties within ``tol`` resolve in (f, b, l, r) order.
    """
    P = np.asarray(X)[:, :2]
    viol = P @ inst.region_A.T  # (N+1, 8)
    viol = viol[:, None, :] - inst.region_b  # a'p - b, (N+1, J, 8)
    sb = inst.sig_rows
    with np.errstate(divide="ignore", invalid="ignore"):
        need = np.where(sb > 0, 1.0 + viol / np.where(sb > 0, sb, 1.0),
                        np.where(viol <= tol, 0.0, np.inf))
    need = np.maximum(need, 0.0)
    req = np.full(inst.region_b.shape[:2] + (N_REGIONS,), -np.inf)
    for r in range(8):
        k = ROW_REGION[r]
        req[:, :, k] = np.maximum(req[:, :, k], need[:, :, r])
    best = req.min(axis=2, keepdims=True)
    return np.argmax(req <= best + tol, axis=2)


@dataclass
class BnbOptions:
    rel_gap: float = 1e-4
    abs_gap: float = 1e-6
    node_limit: int = 50000
    time_limit: float = np.inf
    heuristic_every: int = 25
    qp_tol: float = 1e-8
    polish: bool = True
    backend: str = "clarabel"


def solve_fixed(inst: MiqpInstance, b: BinaryAssignment, slack_ub: float = 1.0,
                tol: float = 1e-8, do_polish: bool = True, backend: str = "ipm") -> QpSolution:
    """QP with every binary fixed; ``slack_ub=inf`` gives the soft variant."""
    lb, ub = inst.fixed_bounds(b, slack_ub)
    p = inst.node_problem(lb, ub)
    sol = solve(p, backend, tol=tol)
    if do_polish and sol.ok:
        sol = polish(p, sol)
    return sol


def _solution_from_x(inst, x, obj, status, binaries, nodes, t0, lb_glob, history):
    X, U, nbar, _, _, S = inst.split(x)
    return MiqpSolution(X=X, U=U, Sigma=S, ref_lane=nbar, binaries=binaries,
                        objective=float(obj), status=status, node_count=nodes,
                        wall_time=time.perf_counter() - t0, lower_bound=float(lb_glob),
                        history=history)


def _infeasible_solution(inst, t0, nodes=0, reason=""):
    N, J = inst.N, inst.n_obs
    nan = np.nan
    sol = MiqpSolution(np.full((N + 1, 4), nan), np.full((N, 2), nan), np.full((N + 1, J), nan),
                       np.full(N + 1, nan), None, np.inf, "infeasible", nodes,
                       time.perf_counter() - t0, np.inf, [])
    log.debug("MIQP infeasible: %s", reason)
    return sol


def solve_bnb(inst: MiqpInstance, opts: BnbOptions | None = None) -> MiqpSolution:
    """Branch-and-bound over QP relaxations.

    Best-first on the relaxation bound with depth-first diving into the child
    whose member has the largest relaxed value. A rounding heuristic supplies
    early incumbents. Region labels of the returned optimum are canonical:
    among regions the optimal positions satisfy with the least slack, the
    first in (f, b, l, r) order.
    """
    opts = opts or BnbOptions()
    t0 = time.perf_counter()
    if inst.infeasible_reason:
        return _infeasible_solution(inst, t0, reason=inst.infeasible_reason)

    def gap(ub_val):
        return max(opts.abs_gap, opts.rel_gap * abs(ub_val + inst.const))

    inc_x, inc_obj, inc_b = None, np.inf, None
    history: list = []
    nodes = 0
    seq = 0
    heap: list = []
    heapq.heappush(heap, (-np.inf, seq, inst.lb0, inst.ub0))
    status = "optimal"
    pruned_lb = np.inf
    best_lb = -np.inf  # every reported bound is valid, so keep the largest

    def try_incumbent(b: BinaryAssignment):
        nonlocal inc_x, inc_obj, inc_b
        sol = solve_fixed(inst, b, 1.0, opts.qp_tol, do_polish=False, backend=opts.backend)
        if sol.ok and sol.objective < inc_obj:
            inc_x, inc_obj, inc_b = sol.x, sol.objective, b

    while heap:
        bound, _, lb, ub = heapq.heappop(heap)
        if bound >= inc_obj - gap(inc_obj):
            pruned_lb = min(pruned_lb, bound)
            heap.clear()
            break
        # dive
        while True:
            if nodes >= opts.node_limit:
                status = "node_limit"
                break
            if time.perf_counter() - t0 > opts.time_limit:
                status = "time_limit"
                break
            nodes += 1
            sol = solve(inst.node_problem(lb, ub), opts.backend, tol=opts.qp_tol)
            if not sol.ok:
                if sol.status != "infeasible":
                    log.debug("relaxation ended with status %s; node pruned", sol.status)
                break
            val = max(sol.objective, bound)
            open_lb = min(val, heap[0][0] if heap else np.inf, pruned_lb, inc_obj)
            best_lb = max(best_lb, open_lb)
            history.append((nodes, float(inc_obj + inst.const), float(best_lb + inst.const)))
            if val >= inc_obj - gap(inc_obj):
                pruned_lb = min(pruned_lb, val)
                break
            x = sol.x
            if _is_integral(x, inst):
                try_incumbent(_round(inst, x))
                break
            if nodes == 1 or nodes % opts.heuristic_every == 0:
                try_incumbent(_round(inst, x))
                if val >= inc_obj - gap(inc_obj):
                    pruned_lb = min(pruned_lb, val)
                    break
            L = inst.layout
            br = branch_select(x[L.gam], x[L.lam])
            kids = _children(inst, br, lb, ub)
            if not kids:
                break
            for _, clb, cub in kids[1:]:
                seq += 1
                heapq.heappush(heap, (val, seq, clb, cub))
            _, lb, ub = kids[0]
            bound = val
        if status != "optimal":
            break

    if inc_b is None:
        if status != "optimal":
            res = _infeasible_solution(inst, t0, nodes, "limit reached without incumbent")
            res.status = status
            return res
        return _infeasible_solution(inst, t0, nodes, "every relaxation infeasible")

    lower = max(best_lb, min(inc_obj, pruned_lb, heap[0][0] if heap else np.inf))
    # final solve with the incumbent binaries, then canonical region labels
    final = solve_fixed(inst, inc_b, 1.0, opts.qp_tol, do_polish=opts.polish,
                        backend=opts.backend)
    if final.ok and final.objective <= inc_obj + 1e-6 * (1 + abs(inc_obj)):
        inc_x, inc_obj = final.x, final.objective
    labels = inc_b
    if inst.n_obs:
        canon = canonical_regions(inst, inc_x[inst.layout.x])
        cand = BinaryAssignment.from_classes(inc_b.lane_classes, canon)
        if cand != inc_b:
            relabeled = solve_fixed(inst, cand, 1.0, opts.qp_tol, do_polish=opts.polish,
                                   backend=opts.backend)
            if relabeled.ok and relabeled.objective <= inc_obj + 1e-7 * (1 + abs(inc_obj)):
                labels, inc_x = cand, relabeled.x
                inc_obj = min(inc_obj, relabeled.objective)
    J = inc_obj + inst.const
    lower = min(lower, inc_obj) + inst.const
    history.append((nodes, float(J), float(lower)))
    return _solution_from_x(inst, inc_x, J, status, labels, nodes, t0, lower, history)


def extract_labels(sol: MiqpSolution, tol: float = INT_TOL) -> BinaryAssignment:
    """Integral binaries of an optimal expert solution."""
    if sol.binaries is None or not sol.ok:
        raise ValueError(f"no integral solution available (status {sol.status})")
    b = sol.binaries
    for arr in (b.Lambda, b.Gamma):
        if np.any(np.minimum(np.abs(arr), np.abs(arr - 1)) > tol):
            raise ValueError("solution binaries are not integral")
    return b.validate()


def solve_expert(pi: PlannerParams, w: MiqpWeights | None = None, m: ModelParams | None = None,
                 opts: BnbOptions | None = None) -> MiqpSolution:
    """Build and solve in one call."""
    m = m or ModelParams()
    w = w or MiqpWeights()
    return solve_bnb(build_miqp(pi, w, m), opts)
