"""Closed-loop highway simulation with Krauss car-following traffic.

The ego replans at ``planner_hz``, applies the first planned control until
the next replan, and is integrated together with collision checks at
``ego_hz``. Traffic agents update at ``traffic_hz`` and are linearly
interpolated in between. Planning problems are built in a frame that moves
with the ego (ego at ``s = 0``), matching the training distribution.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import (
    ROW_REGION,
    VEHICLE_LENGTH,
    VEHICLE_WIDTH,
    EgoState,
    ModelParams,
    PlannerParams,
    discretize_dynamics,
    obstacle_track,
    region_rows,
)
from .miqp import BnbOptions, MiqpWeights, build_miqp, solve_bnb

log = logging.getLogger(__name__)


@dataclass
class TrafficVehicle:
    vid: int
    lane: int
    s: float
    v: float
    length: float = VEHICLE_LENGTH
    width: float = VEHICLE_WIDTH
    v_max: float = 13.9
    a_max: float = 2.6
    b: float = 4.5
    tau: float = 1.0
    eps: float = 0.5
    # lateral position; differs from the lane centre only while changing lanes
    n: float = 0.0
    target_lane: int | None = None
    lc_cooldown: float = 0.0


@dataclass(frozen=True)
class EpisodeConfig:
    duration: float = 30.0
    planner_hz: float = 5.0
    ego_hz: float = 50.0
    traffic_hz: float = 10.0
    n_lanes: int = 3
    flow: float = 0.13
    density: float = 0.01
    seed: int = 0
    v_nominal: float = 13.9
    v_spread: float = 0.2
    v_obs_min: float = 0.2
    v_obs_max: float = 23.0
    v_ref: float = 15.0
    window_back: float = 250.0
    window_front: float = 600.0
    lane_changes: bool = True
    lc_speed: float = 1.5
    # ego start; None draws the lane at random
    ego_v0: float = 15.0
    ego_lane: int | None = None

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not (0 < self.planner_hz <= self.traffic_hz and self.planner_hz <= self.ego_hz):
            raise ValueError("planner rate must be positive and not above the simulation rates")
        if self.n_lanes < 1:
            raise ValueError("n_lanes must be >= 1")
        if self.ego_lane is not None and not 0 <= self.ego_lane < self.n_lanes:
            raise ValueError("ego_lane outside the road")


PRESETS = {
    "sparse": dict(flow=0.13, density=0.01),
    "dense": dict(flow=0.56, density=0.04),
}


def preset(name: str, **kw) -> EpisodeConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown scenario preset {name!r}; expected one of {sorted(PRESETS)}")
    return EpisodeConfig(**{**PRESETS[name], **kw})


# -- traffic rules -------------------------------------------------------------------


def krauss_step(v: float, gap: float, v_lead: float, dt: float, *, a_max: float = 2.6,
                b: float = 4.5, tau: float = 1.0, v_max: float = 13.9, eps: float = 0.0,
                rng: np.random.Generator | None = None) -> float:
    """Krauss speed update for a follower at distance ``gap`` behind a leader."""
    gap = max(gap, 0.0)
    v_safe = -b * tau + math.sqrt((b * tau) ** 2 + v_lead ** 2 + 2.0 * b * gap)
    v_des = min(v_safe, v + a_max * dt, v_max)
    eta = rng.uniform(0.0, eps * a_max * dt) if (eps > 0 and rng is not None) else 0.0
    return max(0.0, v_des - eta)


def safe_gap(v_follow: float, v_lead: float, b: float = 4.5, tau: float = 1.0) -> float:
    """Smallest gap at which the Krauss safe speed is not below ``v_follow``."""
    g = ((v_follow + b * tau) ** 2 - (b * tau) ** 2 - v_lead ** 2) / (2.0 * b)
    return max(g, 0.0)


@dataclass
class Neighbors:
    """Gaps (bumper to bumper) and speeds around a vehicle, per lane offset -1, 0, +1."""

    lead_gap: dict
    lead_v: dict
    rear_gap: dict
    rear_v: dict
    exists: dict


def lane_change_decide(v: float, nb: Neighbors, *, hysteresis: float = 10.0, b: float = 4.5,
                       tau: float = 1.0, v_max: float = 13.9) -> str:
    """Gap acceptance: move to an adjacent lane whose leader gap beats the current one.

    The rear vehicle there must keep a Krauss-safe gap. A clear right lane
    is preferred when the current lane is not obstructed.
    """
    def rear_ok(side):
        return nb.rear_gap[side] > safe_gap(nb.rear_v[side], v, b, tau) + 2.0

    here = nb.lead_gap[0]
    best, best_gap = "keep", here + hysteresis
    for side, name in ((1, "left"), (-1, "right")):
        if not nb.exists[side] or not rear_ok(side):
            continue
        if nb.lead_gap[side] > best_gap:
            best, best_gap = name, nb.lead_gap[side]
    if best == "keep" and nb.exists[-1] and rear_ok(-1):
        # right bias: return when nothing ahead there slows the vehicle down
        free = safe_gap(v_max, nb.lead_v[-1], b, tau) + hysteresis
        if nb.lead_gap[-1] > free and here >= nb.lead_gap[-1] - hysteresis:
            best = "right"
    return best


# -- obstacle selection -----------------------------------------------------------------


@dataclass(frozen=True)
class Snapshot:
    """Traffic state seen by the planner: one row per vehicle."""

    vid: np.ndarray
    lane: np.ndarray
    s: np.ndarray
    n: np.ndarray
    v: np.ndarray
    length: np.ndarray
    width: np.ndarray


def snapshot(vehicles: Sequence[TrafficVehicle]) -> Snapshot:
    return Snapshot(*(np.array([getattr(v, k) for v in vehicles], dtype=dt) for k, dt in
                      (("vid", int), ("lane", int), ("s", float), ("n", float), ("v", float),
                       ("length", float), ("width", float))))


def select_obstacles(ego_s: float, ego_n: float, snap: Snapshot, m: ModelParams, n_lanes: int,
                     n_max: int = 5, s_range: tuple = (-120.0, 200.0),
                     ego_length: float = VEHICLE_LENGTH) -> list[int]:
    """Row indices of the vehicles the planner considers.

    In the ego lane the leader counts; in every other lane the nearest
    vehicle that is ahead of or beside the ego and the next one ahead of it.
    Candidates are ordered by distance (then vehicle id) and cut at
    ``n_max``. The result does not depend on the row order of ``snap``.
    """
    if snap.s.size == 0:
        return []
    ego_lane = m.lane_of(ego_n, n_lanes)
    ds = snap.s - ego_s
    front = ds + 0.5 * snap.length
    cands = []
    for lane in range(n_lanes):
        idx = np.flatnonzero((snap.lane == lane) & (ds >= s_range[0]) & (ds <= s_range[1]))
        if lane == ego_lane:
            idx = idx[ds[idx] > 0]
            take = 1
        else:
            idx = idx[front[idx] > -0.5 * ego_length]
            take = 2
        order = idx[np.lexsort((snap.vid[idx], ds[idx]))]
        cands.extend(order[:take].tolist())
    cands.sort(key=lambda i: (abs(ds[i]), snap.vid[i]))
    return cands[:n_max]


def planner_params(ego: np.ndarray, snap: Snapshot, rows: Sequence[int], m: ModelParams,
                   n_lanes: int, v_ref: float, lane0_ref: float) -> PlannerParams:
    """Planning problem in the frame moving with the ego (ego at ``s = 0``)."""
    obs = tuple(obstacle_track(float(snap.s[i] - ego[0]), float(snap.n[i]), float(snap.v[i]), m,
                               length=float(snap.length[i]), width=float(snap.width[i]))
                for i in rows)
    x0 = EgoState(0.0, float(ego[1]), float(ego[2]), float(ego[3]))
    return PlannerParams(x0, v_ref, n_lanes, obs, lane0_ref)


# -- planners ----------------------------------------------------------------------------


@dataclass
class PlannerOutput:
    ok: bool
    U: np.ndarray | None
    X: np.ndarray | None
    ref_lane: np.ndarray | None
    t_plan: float
    info: dict = field(default_factory=dict)


class ExpertPlanner:
    name = "expert"

    def __init__(self, w: MiqpWeights | None = None, opts: BnbOptions | None = None):
        self.w = w or MiqpWeights()
        self.opts = opts or BnbOptions(time_limit=10.0)

    def __call__(self, pi: PlannerParams, m: ModelParams) -> PlannerOutput:
        t0 = time.perf_counter()
        sol = solve_bnb(build_miqp(pi, self.w, m), self.opts)
        dt = time.perf_counter() - t0
        if not sol.ok:
            return PlannerOutput(False, None, None, None, dt, {"status": sol.status})
        return PlannerOutput(True, sol.U, sol.X, sol.ref_lane, dt,
                             {"status": sol.status, "nodes": sol.node_count,
                              "binaries": sol.binaries})


class LearnedPlanner:
    name = "reds"

    def __init__(self, ens, w: MiqpWeights | None = None, project: bool = True,
                 require_certified: bool = True):
        self.ens = ens
        self.w = w or MiqpWeights()
        self.project = project
        self.require_certified = require_certified

    def __call__(self, pi: PlannerParams, m: ModelParams) -> PlannerOutput:
        from .planner import plan

        t0 = time.perf_counter()
        res = plan(pi, self.ens, self.w, m, project=self.project)
        dt = time.perf_counter() - t0
        if not res.ok:
            return PlannerOutput(False, None, None, None, dt, {"status": res.status})
        sel = res.selected
        safe = res.certified if self.project else sel.feasible
        if self.require_certified and not safe:
            return PlannerOutput(False, None, None, None, dt,
                                 {"status": "uncertified", "certified": False})
        return PlannerOutput(True, res.U_s, res.X_s, sel.ref_lane, dt,
                             {"status": res.status, "certified": res.certified,
                              "feasible": sel.feasible, "t_serial": res.t_serial,
                              "t_parallel": res.t_parallel})


# -- episode -----------------------------------------------------------------------------


@dataclass
class ClosedLoopMetrics:
    collisions: int
    mean_velocity: float
    min_velocity: float
    lane_changes: int
    cost: float
    cost_terms: dict
    fallbacks: int
    plan_time: dict
    certified_rate: float | None = None

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=float))


@dataclass
class EpisodeLog:
    rows: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    ego: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "vehicle", "lane", "s", "n", "v", "flags"])
            wr.writerows(self.rows)


def _spawn_lane(rng, cfg: EpisodeConfig, lane: int, lo: float, hi: float, m: ModelParams,
                next_id: list) -> list[TrafficVehicle]:
    out = []
    if cfg.density <= 0:
        return out
    s = lo + rng.exponential(1.0 / cfg.density)
    while s < hi:
        out.append(_new_vehicle(rng, cfg, lane, s, m, next_id))
        s += max(rng.exponential(1.0 / cfg.density), VEHICLE_LENGTH + 8.0)
    return out


def _new_vehicle(rng, cfg: EpisodeConfig, lane: int, s: float, m: ModelParams,
                 next_id: list) -> TrafficVehicle:
    vmax = float(np.clip(cfg.v_nominal * rng.uniform(1 - cfg.v_spread, 1 + cfg.v_spread),
                         cfg.v_obs_min, cfg.v_obs_max))
    vid = next_id[0]
    next_id[0] += 1
    return TrafficVehicle(vid, lane, float(s), vmax, v_max=vmax, n=m.lane_center(lane))


def _ego_rect_overlap(ego_s, ego_n, s, n, length, width) -> np.ndarray:
    return ((np.abs(s - ego_s) < 0.5 * (length + VEHICLE_LENGTH))
            & (np.abs(n - ego_n) < 0.5 * (width + VEHICLE_WIDTH)))


def _required_slack(p: np.ndarray, bounds: np.ndarray, sigma_bar) -> np.ndarray:
    """Smallest slack per obstacle for which some region holds at position ``p``."""
    if bounds.shape[0] == 0:
        return np.zeros(0)
    A, b, sig = region_rows(bounds, sigma_bar)  # b (J, 8)
    viol = (A @ p)[None, :] - b  # a'p - b <= (sigma - 1) sigma_bar
    with np.errstate(divide="ignore", invalid="ignore"):
        need = np.where(sig > 0, 1.0 + viol / np.where(sig > 0, sig, 1.0),
                        np.where(viol <= 0, 0.0, np.inf))
    req = np.full((bounds.shape[0], 4), -np.inf)
    for r in range(8):
        req[:, ROW_REGION[r]] = np.maximum(req[:, ROW_REGION[r]], need[:, r])
    return np.maximum(req.min(axis=1), 0.0)


def run_episode(cfg: EpisodeConfig, planner: Callable, m: ModelParams | None = None,
                w: MiqpWeights | None = None, *, keep_log: bool = True) -> tuple[ClosedLoopMetrics, EpisodeLog]:
    """Simulate one episode; ``planner(pi, m)`` returns a :class:`PlannerOutput`."""
    m = m or ModelParams()
    w = w or MiqpWeights()
    rng = np.random.default_rng([cfg.seed, 17])
    L = cfg.n_lanes
    next_id = [0]
    ego_lane = int(rng.integers(0, L))
    if cfg.ego_lane is not None:
        ego_lane = cfg.ego_lane
    ego = np.array([0.0, m.lane_center(ego_lane), cfg.ego_v0, 0.0])
    traffic: list[TrafficVehicle] = []
    for lane in range(L):
        for v in _spawn_lane(rng, cfg, lane, -cfg.window_back, cfg.window_front, m, next_id):
            clear = 40.0 if lane == ego_lane else 20.0
            if abs(v.s) > clear:
                traffic.append(v)
    lane0_ref = m.lane_center(ego_lane)
    A, B = discretize_dynamics(1.0 / cfg.ego_hz)
    n_sub = int(round(cfg.ego_hz / cfg.planner_hz))
    t_traffic = 1.0 / cfg.traffic_hz
    log_ = EpisodeLog()
    collisions, colliding = 0, set()
    fallbacks = 0
    plan_times, certs = [], []
    prev_plan: PlannerOutput | None = None
    prev_age = 0
    t = 0.0
    n_ticks = int(round(cfg.duration * cfg.planner_hz))
    cost = {"state": 0.0, "control": 0.0, "lane_change": 0.0, "right": 0.0, "slack": 0.0}
    Qm, Rm = w.matrix("Q"), w.matrix("R")
    road_lo = m.road_limits(L)[0]
    speeds = []
    lane_changes = 0
    dt_plan = 1.0 / cfg.planner_hz
    # traffic state at the start and end of the current traffic interval
    next_traffic_t = 0.0
    prev_pos: dict = {}
    cur_pos: dict = {}

    def traffic_update(dt):
        snap_ = sorted(traffic, key=lambda v: (v.lane, v.s, v.vid))
        by_lane: dict = {}
        for v in snap_:
            by_lane.setdefault(v.lane, []).append(v)
        ego_lanes = {m.lane_of(ego[1] + off, L) for off in (-0.5 * VEHICLE_WIDTH, 0.5 * VEHICLE_WIDTH)}

        def leader(lane, s):
            best_gap, best_v = math.inf, 0.0
            for u in by_lane.get(lane, []):
                if u.s > s:
                    best_gap, best_v = u.s - s, u.v
                    break
            if lane in ego_lanes and ego[0] > s and ego[0] - s < best_gap:
                best_gap, best_v = ego[0] - s, ego[2]
            return best_gap, best_v

        def follower(lane, s):
            best_gap, best_v = math.inf, 0.0
            for u in reversed(by_lane.get(lane, [])):
                if u.s < s:
                    best_gap, best_v = s - u.s, u.v
                    break
            if lane in ego_lanes and ego[0] < s and s - ego[0] < best_gap:
                best_gap, best_v = s - ego[0], ego[2]
            return best_gap, best_v

        new_v = {}
        for v in snap_:
            lanes = {v.lane} | ({v.target_lane} if v.target_lane is not None else set())
            g, vl = min((leader(ln, v.s) for ln in lanes), key=lambda x: x[0])
            gap = g - VEHICLE_LENGTH if math.isfinite(g) else 1e6
            new_v[v.vid] = krauss_step(v.v, gap, vl, dt, a_max=v.a_max, b=v.b, tau=v.tau,
                                       v_max=v.v_max, eps=v.eps, rng=rng)
        for v in snap_:
            v.s += 0.5 * (v.v + new_v[v.vid]) * dt
            v.v = new_v[v.vid]
            v.lc_cooldown = max(0.0, v.lc_cooldown - dt)
            if v.target_lane is not None:
                goal = m.lane_center(v.target_lane)
                step = cfg.lc_speed * dt
                v.n = goal if abs(goal - v.n) <= step else v.n + math.copysign(step, goal - v.n)
                if v.n == goal:
                    v.lane, v.target_lane, v.lc_cooldown = v.target_lane, None, 5.0
            elif cfg.lane_changes and v.lc_cooldown == 0.0:
                nb = Neighbors({}, {}, {}, {}, {})
                for side in (-1, 0, 1):
                    ln = v.lane + side
                    nb.exists[side] = 0 <= ln < L
                    g, vl = leader(ln, v.s) if nb.exists[side] else (0.0, 0.0)
                    nb.lead_gap[side] = g - VEHICLE_LENGTH
                    nb.lead_v[side] = vl
                    g, vr = follower(ln, v.s) if nb.exists[side] else (0.0, 0.0)
                    nb.rear_gap[side] = g - VEHICLE_LENGTH
                    nb.rear_v[side] = vr
                    if side != 0 and nb.exists[side]:
                        # the ego beside the vehicle blocks that lane
                        if (ln in ego_lanes and abs(ego[0] - v.s) < VEHICLE_LENGTH + 2.0):
                            nb.exists[side] = False
                d = lane_change_decide(v.v, nb, v_max=v.v_max, b=v.b, tau=v.tau)
                if d != "keep":
                    v.target_lane = v.lane + (1 if d == "left" else -1)
        # inflow upstream, removal outside the window
        for lane in range(L):
            if rng.random() < cfg.flow * dt:
                s_new = ego[0] - cfg.window_back
                occupied = any(abs(u.s - s_new) < 30.0 for u in by_lane.get(lane, []))
                if not occupied:
                    traffic.append(_new_vehicle(rng, cfg, lane, s_new, m, next_id))
        traffic[:] = [v for v in traffic
                      if ego[0] - cfg.window_back - 50 <= v.s <= ego[0] + cfg.window_front + 200]

    def positions():
        return {v.vid: (v.s, v.n, v.v, v.length, v.width, v.lane) for v in traffic}

    cur_pos = positions()
    prev_pos = dict(cur_pos)
    t_prev_traffic = 0.0
    for tick in range(n_ticks):
        t = tick * dt_plan
        snap = snapshot(sorted(traffic, key=lambda v: v.vid))
        rows = select_obstacles(ego[0], ego[1], snap, m, L)
        pi = planner_params(ego, snap, rows, m, L, cfg.v_ref, lane0_ref)
        out = planner(pi, m)
        plan_times.append(out.t_plan)
        if "certified" in out.info:
            certs.append(bool(out.info["certified"]))
        if keep_log:
            log_.snapshots.append(pi)
        if out.ok:
            u = out.U[0]
            prev_plan, prev_age = out, 0
            new_ref = float(out.ref_lane[1])
        else:
            fallbacks += 1
            log_.events.append((t, "fallback", out.info.get("status")))
            if prev_plan is not None and prev_age + 1 < prev_plan.U.shape[0]:
                prev_age += 1
                u = prev_plan.U[prev_age]
                new_ref = float(prev_plan.ref_lane[min(prev_age + 1, prev_plan.ref_lane.size - 1)])
            else:
                u = np.array([m.lb_u[0], -ego[3] * cfg.planner_hz])
                u = np.clip(u, m.lb_u, m.ub_u)
                new_ref = lane0_ref
        lane_idx = int(np.clip(round(new_ref / m.d_lane), 0, L - 1))
        new_ref = m.lane_center(lane_idx)
        if abs(new_ref - lane0_ref) > 1e-9:
            lane_changes += 1
            cost["lane_change"] += w.w_lc * round(abs(new_ref - lane0_ref) / m.d_lane)
        # stage cost at the planning rate, as in the planner's objective
        e = np.array([0.0, ego[1] - lane0_ref, ego[2] - cfg.v_ref, ego[3]])
        cost["state"] += float(e @ Qm @ e)
        cost["control"] += float(np.asarray(u) @ Rm @ np.asarray(u))
        cost["right"] += w.w_rght * (ego[1] - road_lo)
        if rows:
            bnd = np.stack([ob.bounds[0] for ob in pi.obstacles])
            sig = _required_slack(np.array([0.0, ego[1]]), bnd, w.sigma_bar)
            cost["slack"] += w.w_dst * float(np.sum(np.minimum(sig, 1e3) ** 2))
        lane0_ref = new_ref
        speeds.append(ego[2])
        for k in range(n_sub):
            ts = t + (k + 1) / cfg.ego_hz
            while next_traffic_t <= ts - 1e-12:
                prev_pos = positions()
                t_prev_traffic = next_traffic_t
                traffic_update(t_traffic)
                cur_pos = positions()
                next_traffic_t += t_traffic
            ego = A @ ego + B @ u
            # interpolate traffic between its last two updates
            a = np.clip((ts - t_prev_traffic) / t_traffic, 0.0, 1.0)
            hit = set()
            for vid, (s1, n1, v1, ln, wd, lane) in cur_pos.items():
                s0, n0 = prev_pos.get(vid, (s1, n1))[:2]
                s_i = s0 + a * (s1 - s0)
                n_i = n0 + a * (n1 - n0)
                if _ego_rect_overlap(ego[0], ego[1], s_i, n_i, ln, wd):
                    hit.add(vid)
            for vid in hit - colliding:
                collisions += 1
                log_.events.append((ts, "collision", vid))
            colliding = hit
        if keep_log:
            log_.ego.append((t, *ego.tolist()))
            log_.rows.append((round(t, 6), "ego", m.lane_of(ego[1], L), ego[0], ego[1], ego[2],
                              "fallback" if not out.ok else ""))
            for v in sorted(traffic, key=lambda v: v.vid):
                flag = "selected" if v.vid in {int(snap.vid[i]) for i in rows} else ""
                log_.rows.append((round(t, 6), v.vid, v.lane, v.s, v.n, v.v, flag))
    total = sum(cost.values())
    metrics = ClosedLoopMetrics(
        collisions=collisions, mean_velocity=float(np.mean(speeds)),
        min_velocity=float(np.min(speeds)), lane_changes=lane_changes,
        cost=total / cfg.duration, cost_terms={k: v / cfg.duration for k, v in cost.items()},
        fallbacks=fallbacks,
        plan_time={"p50": float(np.percentile(plan_times, 50)),
                   "p90": float(np.percentile(plan_times, 90)),
                   "max": float(np.max(plan_times))},
        certified_rate=float(np.mean(certs)) if certs else None)
    return metrics, log_
