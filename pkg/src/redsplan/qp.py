"""Convex quadratic programming by a primal-dual interior-point method.

Problem form::

    minimize    0.5 x'Hx + g'x
    subject to  A_eq x = b_eq
                lb_in <= A_in x <= ub_in
                lb <= x <= ub

The solver is Mehrotra's predictor-corrector on the reduced (normal-equation
free) KKT system. Variables with ``lb == ub`` are eliminated before the
iteration starts, which is how branch-and-bound fixes binaries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"

_DENSE_LIMIT = 120


class QpError(ValueError):
    """Malformed QP: dimension mismatch or a cost matrix that is not PSD."""


def _as_csr(M, rows, cols) -> sp.csr_matrix:
    if M is None:
        return sp.csr_matrix((rows, cols))
    M = sp.csr_matrix(M, dtype=float)
    if M.shape != (rows, cols):
        raise QpError(f"matrix has shape {M.shape}, expected {(rows, cols)}")
    return M


@dataclass
class QpProblem:
    H: object
    g: np.ndarray
    A_eq: object = None
    b_eq: np.ndarray | None = None
    A_in: object = None
    lb_in: np.ndarray | None = None
    ub_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float).ravel()
        n = self.g.size
        self.H = sp.csr_matrix(self.H, dtype=float) if self.H is not None else sp.csr_matrix((n, n))
        if self.H.shape != (n, n):
            raise QpError(f"H has shape {self.H.shape}, expected {(n, n)}")
        m_eq = 0 if self.b_eq is None else np.size(self.b_eq)
        self.A_eq = _as_csr(self.A_eq, m_eq, n)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, float).ravel()
        m_in = 0 if self.A_in is None else self.A_in.shape[0]
        self.A_in = _as_csr(self.A_in, m_in, n)
        self.lb_in = np.full(m_in, -np.inf) if self.lb_in is None else np.asarray(self.lb_in, float).ravel()
        self.ub_in = np.full(m_in, np.inf) if self.ub_in is None else np.asarray(self.ub_in, float).ravel()
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, float).ravel()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, float).ravel()
        for name, arr, size in (("lb_in", self.lb_in, m_in), ("ub_in", self.ub_in, m_in),
                                ("lb", self.lb, n), ("ub", self.ub, n)):
            if arr.size != size:
                raise QpError(f"{name} has length {arr.size}, expected {size}")

    @property
    def n(self) -> int:
        return self.g.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.H @ x) + self.g @ x)


@dataclass
class QpSolution:
    x: np.ndarray
    y_eq: np.ndarray
    z_in_lo: np.ndarray
    z_in_up: np.ndarray
    z_lo: np.ndarray
    z_up: np.ndarray
    objective: float
    status: str
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL

    def dual_objective(self, p: QpProblem) -> float:
        """Wolfe dual value at ``(x, duals)``; equals the primal at optimality."""
        x = self.x
        val = -0.5 * x @ (p.H @ x) - self.y_eq @ p.b_eq
        for z, bound, sign in ((self.z_in_up, p.ub_in, -1.0), (self.z_in_lo, p.lb_in, 1.0),
                               (self.z_up, p.ub, -1.0), (self.z_lo, p.lb, 1.0)):
            fin = np.isfinite(bound)
            val += sign * float(z[fin] @ bound[fin])
        return float(val)


def kkt_residuals(p: QpProblem, sol: QpSolution) -> tuple[float, float, float]:
    """Max-norm stationarity, primal infeasibility and complementarity."""
    x = sol.x
    grad = (p.H @ x + p.g + p.A_eq.T @ sol.y_eq + p.A_in.T @ (sol.z_in_up - sol.z_in_lo)
            + sol.z_up - sol.z_lo)
    stat = float(np.max(np.abs(grad), initial=0.0))
    ax = p.A_in @ x
    prim = max(
        float(np.max(np.abs(p.A_eq @ x - p.b_eq), initial=0.0)),
        float(np.max(np.maximum(ax - p.ub_in, p.lb_in - ax), initial=0.0)),
        float(np.max(np.maximum(x - p.ub, p.lb - x), initial=0.0)),
    )
    comp = 0.0
    for z, gap in ((sol.z_in_up, p.ub_in - ax), (sol.z_in_lo, ax - p.lb_in),
                   (sol.z_up, p.ub - x), (sol.z_lo, x - p.lb)):
        fin = np.isfinite(gap)
        if np.any(fin):
            comp = max(comp, float(np.max(np.abs(z[fin] * gap[fin]))))
        if np.any(~fin) and np.any(z[~fin] != 0):
            comp = np.inf
    return stat, max(prim, 0.0), comp


def check_psd(H, tol: float = 1e-10) -> None:
    """Raise :class:`QpError` unless ``H`` is symmetric positive semidefinite.

    Components of the sparsity graph are checked separately, so block
    diagonal costs (the common case here) cost almost nothing.
    """
    H = sp.csr_matrix(H)
    n = H.shape[0]
    if n == 0:
        return
    scale = max(1.0, float(abs(H).max()) if H.nnz else 0.0)
    if H.nnz and abs(H - H.T).max() > tol * scale:
        raise QpError("H is not symmetric")
    offdiag = H - sp.diags(H.diagonal())
    offdiag.eliminate_zeros()
    if offdiag.nnz == 0:
        if np.any(H.diagonal() < -tol * scale):
            raise QpError("H is not positive semidefinite")
        return
    ncomp, labels = connected_components(offdiag, directed=False)
    order = np.argsort(labels, kind="stable")
    splits = np.flatnonzero(np.diff(labels[order])) + 1
    for idx in np.split(order, splits):
        if idx.size == 1:
            if H[idx[0], idx[0]] < -tol * scale:
                raise QpError("H is not positive semidefinite")
            continue
        block = H[idx][:, idx].toarray()
        if np.linalg.eigvalsh(block).min() < -1e-9 * scale:
            raise QpError("H is not positive semidefinite")


class _Kkt:
    """Reduced KKT operator ``[[H + G'WG + dp I, A'], [A, -dd I]]``.

    Small systems are assembled densely. Larger ones keep a fixed CSC
    pattern so each iteration only refreshes the data vector from ``W``.
    """

    def __init__(self, H: sp.csr_matrix, A: sp.csr_matrix, G: sp.csr_matrix,
                 delta: float = 1e-9):
        n, me, mi = H.shape[0], A.shape[0], G.shape[0]
        self.n, self.me, self.dim = n, me, n + me
        self.delta = delta
        self.regdiag = np.concatenate([np.full(n, delta), np.full(me, -delta)])
        self.dense = self.dim <= _DENSE_LIMIT
        if self.dense:
            self.Hd = H.toarray()
            self.Ad = A.toarray()
            self.Gd = G.toarray()
            return
        Hc, Ac = H.tocoo(), A.tocoo()
        counts = np.diff(G.indptr)
        pair_counts = counts**2
        total = int(pair_counts.sum())
        cnt = np.repeat(counts, pair_counts)
        start = np.repeat(G.indptr[:-1], pair_counts)
        local = np.arange(total) - np.repeat(np.cumsum(pair_counts) - pair_counts, pair_counts)
        a = start + local // np.maximum(cnt, 1)
        b = start + local % np.maximum(cnt, 1)
        dim = self.dim
        diag = np.arange(dim)
        const_r = np.concatenate([Hc.row, Ac.row + n, Ac.col, diag]).astype(np.int64)
        const_c = np.concatenate([Hc.col, Ac.col, Ac.row + n, diag]).astype(np.int64)
        const_v = np.concatenate([Hc.data, Ac.data, Ac.data, self.regdiag])
        lin = np.concatenate([const_r * dim + const_c,
                              G.indices[a].astype(np.int64) * dim + G.indices[b]])
        uniq, inv = np.unique(lin, return_inverse=True)
        nk = uniq.size
        nc = const_r.size
        self.base = np.bincount(inv[:nc], weights=const_v, minlength=nk)
        self.wmap = sp.csr_matrix(
            (G.data[a] * G.data[b], (inv[nc:], np.repeat(np.arange(mi), pair_counts))),
            shape=(nk, mi))
        self.indices = (uniq % dim).astype(np.int32)
        self.indptr = np.concatenate(
            [[0], np.cumsum(np.bincount(uniq // dim, minlength=dim))]).astype(np.int32)

    def factor(self, w: np.ndarray) -> None:
        if self.dense:
            n = self.n
            K = np.empty((self.dim, self.dim))
            K[:n, :n] = self.Hd + (self.Gd.T * w) @ self.Gd
            K[:n, n:] = self.Ad.T
            K[n:, :n] = self.Ad
            K[n:, n:] = 0.0
            K[np.diag_indices(self.dim)] += self.regdiag
            self.K = K
            self._lu = sla.lu_factor(K, check_finite=False)
            return
        data = self.base + self.wmap @ w
        # symmetric, so the CSR arrays double as CSC
        K = sp.csc_matrix((data, self.indices, self.indptr), shape=(self.dim, self.dim))
        self.K = K
        try:
            self._lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.01,
                                 options=dict(SymmetricMode=True))
        except RuntimeError:
            self._lu = spla.splu(K)

    def _raw(self, r):
        if self.dense:
            return sla.lu_solve(self._lu, r, check_finite=False)
        return self._lu.solve(r)

    def solve(self, r: np.ndarray, refine: int = 3) -> np.ndarray:
        d = self._raw(r)
        scale = 1e-14 * max(1.0, np.abs(r).max(initial=0.0))
        for _ in range(refine):
            res = r - (self.K @ d - self.regdiag * d)
            if np.abs(res).max(initial=0.0) <= scale:
                break
            d = d + self._raw(res)
        return d


def _group_max(idx, vals, size, order, starts, keys):
    out = np.zeros(size)
    if vals.size:
        out[keys] = np.maximum.reduceat(vals[order], starts)
    return out


def _grouping(idx):
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.concatenate([[True], sidx[1:] != sidx[:-1]])) if sidx.size else np.zeros(0, int)
    keys = sidx[starts] if sidx.size else np.zeros(0, int)
    return order, starts, keys


def _ruiz(H, A, G, iters: int = 8):
    """Modified Ruiz equilibration of variables and constraint rows."""
    n, me, mi = H.shape[0], A.shape[0], G.shape[0]
    Hc, Ac, Gc = H.tocoo(), A.tocoo(), G.tocoo()
    cols = np.concatenate([Hc.col, Ac.col, Gc.col])
    cgrp = _grouping(cols)
    agrp = _grouping(Ac.row)
    ggrp = _grouping(Gc.row)
    habs, aabs, gabs = np.abs(Hc.data), np.abs(Ac.data), np.abs(Gc.data)
    D, Ea, Eg = np.ones(n), np.ones(me), np.ones(mi)
    for _ in range(iters):
        hv = habs * D[Hc.row] * D[Hc.col]
        av = aabs * Ea[Ac.row] * D[Ac.col]
        gv = gabs * Eg[Gc.row] * D[Gc.col]
        cn = _group_max(cols, np.concatenate([hv, av, gv]), n, *cgrp)
        ra = _group_max(Ac.row, av, me, *agrp)
        rg = _group_max(Gc.row, gv, mi, *ggrp)
        for v in (cn, ra, rg):
            v[v < 1e-8] = 1.0
        D /= np.sqrt(np.clip(cn, 1e-4, 1e4))
        Ea /= np.sqrt(np.clip(ra, 1e-4, 1e4))
        Eg /= np.sqrt(np.clip(rg, 1e-4, 1e4))
    return D, Ea, Eg


def _scale_rows_cols(M: sp.csr_matrix, r, c) -> sp.csr_matrix:
    M = M.copy()
    M.data = M.data * np.repeat(r, np.diff(M.indptr)) * c[M.indices]
    return M


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _ipm(H, g, A, b, G, h, tol, max_iter, x_init=None):
    n, me, mi = g.size, b.size, h.size
    kkt = _Kkt(H, A, G)
    if kkt.dense:
        H, A, G = kkt.Hd, kkt.Ad, kkt.Gd
        At, Gt = A.T, G.T
    else:
        At, Gt = A.T.tocsr(), G.T.tocsr()
    nb = np.abs(b).max(initial=0.0)
    nh = np.abs(h).max(initial=0.0)
    ng = np.abs(g).max(initial=0.0)

    kkt.factor(np.ones(mi))
    sol = kkt.solve(np.concatenate([-g + Gt @ h, b]))
    x, y = sol[:n], sol[n:]
    if x_init is not None:
        x = np.asarray(x_init, dtype=float).copy()
    s = h - G @ x
    z = -s.copy()
    if mi:
        a_p = -s.min()
        if a_p >= -1e-8:
            s = s + 1.0 + a_p
        a_d = -z.min()
        if a_d >= -1e-8:
            z = z + 1.0 + a_d
    history = []
    status = MAX_ITER
    it = 0
    for it in range(1, max_iter + 1):
        Hx = H @ x
        r_d = Hx + g + At @ y + Gt @ z
        r_e = A @ x - b
        r_i = G @ x + s - h
        sz = float(s @ z)
        mu = sz / mi if mi else 0.0
        obj = 0.5 * float(x @ Hx) + float(g @ x)
        pres = max(np.abs(r_e).max(initial=0.0) / (1.0 + nb),
                   np.abs(r_i).max(initial=0.0) / (1.0 + nh))
        dres = np.abs(r_d).max(initial=0.0) / (1.0 + max(ng, np.abs(Hx).max(initial=0.0)))
        gap = sz / (1.0 + abs(obj))
        log.debug("ipm %d pres %.2e dres %.2e gap %.2e mu %.2e", it, pres, dres, gap, mu)
        if pres <= tol and dres <= tol and gap <= tol:
            status = OPTIMAL
            break
        if mi:
            # Farkas certificate for primal infeasibility
            scale = max(z.max(), np.abs(y).max(initial=0.0))
            if scale > 1e6:
                yh, zh = y / scale, z / scale
                cert = np.abs(At @ yh + Gt @ zh).max(initial=0.0)
                if cert <= 1e-7 and float(b @ yh + h @ zh) < -1e-7:
                    status = INFEASIBLE
                    break
        history.append(pres)
        if it > 10 and pres > 1e-6 and pres > 0.5 * history[-11]:
            status = INFEASIBLE
            break
        w = z / s
        try:
            kkt.factor(w)
        except (RuntimeError, ValueError, np.linalg.LinAlgError):
            break
        r_c = s * z
        d = kkt.solve(np.concatenate([-r_d - Gt @ (w * r_i - z), -r_e]))
        ds_a = -r_i - G @ d[:n]
        dz_a = -(r_c + z * ds_a) / s
        a_aff = min(_max_step(s, ds_a), _max_step(z, dz_a))
        mu_aff = float((s + a_aff * ds_a) @ (z + a_aff * dz_a)) / mi if mi else 0.0
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        r_c = r_c + ds_a * dz_a - sigma * mu
        d = kkt.solve(np.concatenate([-r_d - Gt @ (w * r_i - r_c / s), -r_e]))
        dx, dy = d[:n], d[n:]
        ds = -r_i - G @ dx
        dz = -(r_c + z * ds) / s
        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz))) if mi else 1.0
        if not (np.all(np.isfinite(d)) and np.isfinite(alpha)):
            break
        x = x + alpha * dx
        y = y + alpha * dy
        s = np.maximum(s + alpha * ds, 1e-300)
        z = np.maximum(z + alpha * dz, 1e-300)
    return x, y, z, s, status, it


def _build_inequalities(A_in, lb_in, ub_in, lb, ub):
    """Stack finite one-sided rows into ``G x <= h`` and remember where they came from."""
    n = lb.size
    up_in = np.flatnonzero(np.isfinite(ub_in))
    lo_in = np.flatnonzero(np.isfinite(lb_in))
    up_x = np.flatnonzero(np.isfinite(ub))
    lo_x = np.flatnonzero(np.isfinite(lb))
    eye = sp.identity(n, format="csr")
    G = sp.vstack([A_in[up_in], -A_in[lo_in], eye[up_x], -eye[lo_x]], format="csr")
    h = np.concatenate([ub_in[up_in], -lb_in[lo_in], ub[up_x], -lb[lo_x]])
    return G, h, (up_in, lo_in, up_x, lo_x)


def solve_qp(p: QpProblem, warm_start: QpSolution | None = None, *, tol: float = 1e-8,
             max_iter: int = 100, check: bool = True) -> QpSolution:
    """Solve ``p``; see the module docstring for the problem form.

    ``warm_start`` only seeds the primal iterate. Interior-point methods gain
    little from it, but it keeps the signature uniform for callers.
    """
    n = p.n
    if check:
        check_psd(p.H)
    lb, ub = p.lb.copy(), p.ub.copy()
    if np.any(lb > ub + 1e-9):
        return _infeasible(p, "crossed variable bounds")
    fixed = np.isfinite(lb) & np.isfinite(ub) & (ub - lb <= 1e-12)
    free = np.flatnonzero(~fixed)
    fix_idx = np.flatnonzero(fixed)
    x_fix = lb[fix_idx]

    H = p.H
    Hff = H[free][:, free]
    g_r = p.g[free] + (H[free][:, fix_idx] @ x_fix if fix_idx.size else 0.0)
    const = 0.5 * x_fix @ (H[fix_idx][:, fix_idx] @ x_fix) + p.g[fix_idx] @ x_fix if fix_idx.size else 0.0

    A_eq = p.A_eq[:, free]
    b_eq = p.b_eq - (p.A_eq[:, fix_idx] @ x_fix if fix_idx.size else 0.0)
    A_in = p.A_in[:, free]
    off = p.A_in[:, fix_idx] @ x_fix if fix_idx.size else np.zeros(p.A_in.shape[0])
    lb_in = p.lb_in - off
    ub_in = p.ub_in - off

    # rows with equal bounds become equalities
    eq_rows = np.flatnonzero(np.isfinite(lb_in) & (np.abs(ub_in - lb_in) <= 1e-12))
    in_rows = np.setdiff1d(np.arange(A_in.shape[0]), eq_rows)
    if eq_rows.size:
        A_eq = sp.vstack([A_eq, A_in[eq_rows]], format="csr")
        b_eq = np.concatenate([b_eq, ub_in[eq_rows]])
    A_ineq, lb_ineq, ub_ineq = A_in[in_rows], lb_in[in_rows], ub_in[in_rows]

    # drop empty rows after elimination
    eq_nnz = np.diff(A_eq.indptr)
    empty = eq_nnz == 0
    if np.any(np.abs(b_eq[empty]) > 1e-9):
        return _infeasible(p, "empty equality row with nonzero right-hand side")
    keep_eq = np.flatnonzero(~empty)
    in_nnz = np.diff(A_ineq.indptr)
    empty_in = in_nnz == 0
    if np.any(lb_ineq[empty_in] > 1e-9) or np.any(ub_ineq[empty_in] < -1e-9):
        return _infeasible(p, "empty inequality row excludes zero")
    keep_in = np.flatnonzero(~empty_in)
    A_eq_k, b_eq_k = A_eq[keep_eq], b_eq[keep_eq]
    A_ineq_k = A_ineq[keep_in]
    G, h, maps = _build_inequalities(A_ineq_k, lb_ineq[keep_in], ub_ineq[keep_in],
                                     lb[free], ub[free])

    Hff = sp.csr_matrix(Hff)
    A_eq_k = sp.csr_matrix(A_eq_k)
    D, Ea, Eg = _ruiz(Hff, A_eq_k, G)
    Hs = _scale_rows_cols(Hff, D, D)
    gs = D * g_r
    cscale = max(1.0, np.abs(Hs.data).max(initial=0.0), np.abs(gs).max(initial=0.0))
    c = 1.0 / cscale
    Hs.data *= c
    As = _scale_rows_cols(A_eq_k, Ea, D)
    bs = Ea * b_eq_k
    Gs = _scale_rows_cols(G, Eg, D)
    hs = Eg * h
    x_init = None
    if warm_start is not None and warm_start.x.size == n:
        x_init = warm_start.x[free] / D
    xs, ys, zs, ss, status, iters = _ipm(Hs, c * gs, As, bs, Gs, hs, tol, max_iter, x_init)

    x_free = D * xs
    y_k = Ea * ys / c
    z_g = Eg * zs / c
    x = np.empty(n)
    x[free] = x_free
    x[fix_idx] = x_fix

    # map duals back to the caller's constraint classes
    up_in, lo_in, up_x, lo_x = maps
    k1, k2, k3 = up_in.size, up_in.size + lo_in.size, up_in.size + lo_in.size + up_x.size
    y_eq_all = np.zeros(A_eq.shape[0])
    y_eq_all[keep_eq] = y_k
    y_eq = y_eq_all[: p.b_eq.size]
    z_in_up = np.zeros(p.A_in.shape[0])
    z_in_lo = np.zeros(p.A_in.shape[0])
    z_in_up[in_rows[keep_in[up_in]]] = z_g[:k1]
    z_in_lo[in_rows[keep_in[lo_in]]] = z_g[k1:k2]
    y_conv = y_eq_all[p.b_eq.size:]
    z_in_up[eq_rows] = np.maximum(y_conv, 0.0)
    z_in_lo[eq_rows] = np.maximum(-y_conv, 0.0)
    z_up = np.zeros(n)
    z_lo = np.zeros(n)
    z_up[free[up_x]] = z_g[k2:k3]
    z_lo[free[lo_x]] = z_g[k3:]
    if fix_idx.size:
        r = (H @ x + p.g + p.A_eq.T @ y_eq + p.A_in.T @ (z_in_up - z_in_lo))[fix_idx]
        z_up[fix_idx] = np.maximum(-r, 0.0)
        z_lo[fix_idx] = np.maximum(r, 0.0)
    obj = float(0.5 * x_free @ (Hff @ x_free) + g_r @ x_free + const)
    return QpSolution(x, y_eq, z_in_lo, z_in_up, z_lo, z_up, obj, status, iters,
                      info={"n_free": int(free.size)})


def _infeasible(p: QpProblem, reason: str) -> QpSolution:
    n, me, mi = p.n, p.b_eq.size, p.A_in.shape[0]
    return QpSolution(np.full(n, np.nan), np.zeros(me), np.zeros(mi), np.zeros(mi),
                      np.zeros(n), np.zeros(n), np.inf, INFEASIBLE, 0, info={"reason": reason})


def _active_kkt(p: QpProblem, in_up, in_lo, x_up, x_lo):
    """Solve the equality-constrained QP with the given constraints held active.

    Returns ``(x, y_eq, lam_in, z_bound)`` with signed multipliers, or None
    when the system cannot be solved.
    """
    n = p.n
    fixed = x_up | x_lo
    free = np.flatnonzero(~fixed)
    fix_idx = np.flatnonzero(fixed)
    xf = np.where(x_up, p.ub, np.where(x_lo, p.lb, 0.0))
    act = np.flatnonzero(in_up | in_lo)
    rhs_in = np.where(in_up, p.ub_in, p.lb_in)[act]
    C = sp.vstack([p.A_eq, p.A_in[act]], format="csr")
    d = np.concatenate([p.b_eq, rhs_in]) - C[:, fix_idx] @ xf[fix_idx]
    Cf = C[:, free]
    # rows whose variables are all fixed carry no information; they must already hold
    live = np.diff(Cf.indptr) > 0
    if np.any(np.abs(d[~live]) > 1e-9 * (1 + np.abs(d[~live]))):
        return None
    rows = np.flatnonzero(live)
    Cf, d = Cf[rows], d[rows]
    H = p.H
    Hff = H[free][:, free]
    gf = p.g[free] + H[free][:, fix_idx] @ xf[fix_idx]
    # regularized factorization tolerates dependent active rows; refinement
    # against the exact system recovers the accuracy
    K = sp.bmat([[Hff, Cf.T], [Cf, None]], format="csc")
    Kr = sp.bmat([[Hff + 1e-10 * sp.identity(free.size), Cf.T],
                  [Cf, -1e-8 * sp.identity(rows.size)]], format="csc")
    rhs = np.concatenate([-gf, d])
    try:
        lu = spla.splu(Kr)
        with np.errstate(all="ignore"):
            v = lu.solve(rhs)
            for _ in range(10):
                r = rhs - K @ v
                if np.abs(r).max(initial=0.0) <= 1e-13 * (1 + np.abs(rhs).max(initial=0.0)):
                    break
                v = v + lu.solve(r)
    except RuntimeError:
        return None
    if not np.all(np.isfinite(v)):
        return None
    x = xf.copy()
    x[free] = v[:free.size]
    lam = np.zeros(C.shape[0])
    lam[rows] = v[free.size:]
    y_eq = lam[:p.b_eq.size]
    lam_in = np.zeros(p.A_in.shape[0])
    lam_in[act] = lam[p.b_eq.size:]
    # stationarity gives the bound multipliers of the fixed variables
    r = H @ x + p.g + p.A_eq.T @ y_eq + p.A_in.T @ lam_in
    z_bound = np.zeros(n)
    z_bound[fix_idx] = -r[fix_idx]
    return x, y_eq, lam_in, z_bound


def polish(p: QpProblem, sol: QpSolution, *, rounds: int = 6) -> QpSolution:
    """Refine an interior-point solution by solving active-set KKT systems.

    The first active set holds the constraints whose multiplier exceeds
    their slack. Each round adds violated constraints and releases those
    with a wrong-signed multiplier. The refined point is accepted only if it
    is primal feasible, dual feasible and not worse than ``sol``; otherwise
    ``sol`` is returned unchanged.
    """
    if not sol.ok:
        return sol
    x = sol.x
    ax = p.A_in @ x
    with np.errstate(invalid="ignore"):
        in_up = np.isfinite(p.ub_in) & (sol.z_in_up > np.maximum(p.ub_in - ax, 0.0))
        in_lo = np.isfinite(p.lb_in) & (sol.z_in_lo > np.maximum(ax - p.lb_in, 0.0)) & ~in_up
        x_up = np.isfinite(p.ub) & ((sol.z_up > np.maximum(p.ub - x, 0.0)) | (p.ub - p.lb <= 0))
        x_lo = np.isfinite(p.lb) & (sol.z_lo > np.maximum(x - p.lb, 0.0)) & ~x_up
    ftol = 1e-9
    dtol = 1e-9 * max(1.0, np.abs(p.g).max(initial=0.0))
    for _ in range(rounds):
        res = _active_kkt(p, in_up, in_lo, x_up, x_lo)
        if res is None:
            return sol
        xn, y_eq, lam_in, z_bound = res
        axn = p.A_in @ xn
        with np.errstate(invalid="ignore"):
            v_up = np.isfinite(p.ub_in) & (axn - p.ub_in > ftol * (1 + np.abs(p.ub_in)))
            v_lo = np.isfinite(p.lb_in) & (p.lb_in - axn > ftol * (1 + np.abs(p.lb_in)))
            vx_up = np.isfinite(p.ub) & (xn - p.ub > ftol * (1 + np.abs(p.ub)))
            vx_lo = np.isfinite(p.lb) & (p.lb - xn > ftol * (1 + np.abs(p.lb)))
        w_up = in_up & (lam_in < -dtol)
        w_lo = in_lo & (lam_in > dtol)
        wx_up = x_up & (z_bound < -dtol) & (p.ub - p.lb > 0)
        wx_lo = x_lo & (z_bound > dtol)
        primal_ok = not (v_up.any() or v_lo.any() or vx_up.any() or vx_lo.any())
        dual_ok = not (w_up.any() or w_lo.any() or wx_up.any() or wx_lo.any())
        if primal_ok and dual_ok:
            break
        in_up = (in_up & ~w_up) | v_up
        in_lo = ((in_lo & ~w_lo) | v_lo) & ~in_up
        x_up = (x_up & ~wx_up) | vx_up
        x_lo = ((x_lo & ~wx_lo) | vx_lo) & ~x_up
    else:
        return sol
    if np.abs(p.A_eq @ xn - p.b_eq).max(initial=0.0) > ftol * (1 + np.abs(p.b_eq).max(initial=0.0)):
        return sol
    obj = p.objective(xn)
    if obj > sol.objective + 1e-9 * (1 + abs(sol.objective)):
        return sol
    # both multipliers may be set when an equal-bound pair is active
    z_up = np.where(x_up, np.maximum(z_bound, 0.0), 0.0)
    z_lo = np.where(x_lo | (x_up & (p.ub - p.lb <= 0)), np.maximum(-z_bound, 0.0), 0.0)
    return QpSolution(
        xn, y_eq, np.where(in_lo, np.maximum(-lam_in, 0.0), 0.0),
        np.where(in_up, np.maximum(lam_in, 0.0), 0.0), z_lo, z_up, obj,
        OPTIMAL, sol.iterations, info=dict(sol.info, polished=True))


def solve_qp_clarabel(p: QpProblem, *, tol: float = 1e-9, max_iter: int = 200) -> QpSolution:
    """Same contract as :func:`solve_qp`, delegated to the Clarabel interior-point solver."""
    import clarabel

    n = p.n
    fixed = np.isfinite(p.lb) & np.isfinite(p.ub) & (p.ub - p.lb <= 1e-12)
    in_eq = np.isfinite(p.lb_in) & (np.abs(p.ub_in - p.lb_in) <= 1e-12)
    fu = np.isfinite(p.ub_in) & ~in_eq
    fl = np.isfinite(p.lb_in) & ~in_eq
    bu = np.isfinite(p.ub) & ~fixed
    bl = np.isfinite(p.lb) & ~fixed
    eye = sp.identity(n, format="csr")
    A = sp.vstack([p.A_eq, p.A_in[in_eq], eye[fixed], p.A_in[fu], -p.A_in[fl], eye[bu], -eye[bl]],
                  format="csc")
    m_eq = p.b_eq.size + int(in_eq.sum()) + int(fixed.sum())
    b = np.concatenate([p.b_eq, p.ub_in[in_eq], p.lb[fixed], p.ub_in[fu], -p.lb_in[fl],
                        p.ub[bu], -p.lb[bl]])
    cones = []
    if m_eq:
        cones.append(clarabel.ZeroConeT(m_eq))
    if b.size - m_eq:
        cones.append(clarabel.NonnegativeConeT(b.size - m_eq))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.max_iter = max_iter
    P = sp.triu(p.H, format="csc")
    res = clarabel.DefaultSolver(P, p.g, A, b, cones, settings).solve()
    st = str(res.status)
    if st in ("Solved", "AlmostSolved"):
        status = OPTIMAL
    elif "Infeasible" in st:
        return _infeasible(p, "clarabel: " + st)
    else:
        status = MAX_ITER
    x = np.asarray(res.x)
    z = np.asarray(res.z)
    k = 0

    def take(size):
        nonlocal k
        out = z[k:k + size]
        k += size
        return out

    y_eq = take(p.b_eq.size)
    y_ineq_eq = take(int(in_eq.sum()))
    y_fix = take(int(fixed.sum()))
    m_in = p.A_in.shape[0]
    z_in_up = np.zeros(m_in)
    z_in_lo = np.zeros(m_in)
    z_in_up[fu] = take(int(fu.sum()))
    z_in_lo[fl] = take(int(fl.sum()))
    z_in_up[in_eq] = np.maximum(y_ineq_eq, 0.0)
    z_in_lo[in_eq] = np.maximum(-y_ineq_eq, 0.0)
    z_up = np.zeros(n)
    z_lo = np.zeros(n)
    z_up[bu] = take(int(bu.sum()))
    z_lo[bl] = take(int(bl.sum()))
    z_up[fixed] = np.maximum(y_fix, 0.0)
    z_lo[fixed] = np.maximum(-y_fix, 0.0)
    return QpSolution(x, y_eq, z_in_lo, z_in_up, z_lo, z_up, p.objective(x), status,
                      int(res.iterations), info={"backend": "clarabel"})


BACKENDS = ("ipm", "clarabel")


def solve(p: QpProblem, backend: str = "ipm", *, tol: float = 1e-8) -> QpSolution:
    """Dispatch to the named backend; both share the :class:`QpSolution` contract."""
    if backend == "ipm":
        return solve_qp(p, tol=tol, check=False)
    if backend == "clarabel":
        return solve_qp_clarabel(p, tol=min(tol, 1e-9))
    raise ValueError(f"unknown QP backend {backend!r}; expected one of {BACKENDS}")
