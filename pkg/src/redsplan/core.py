"""Domain types, point-mass dynamics and obstacle geometry in the road frame.

Coordinates are Frenet-style: ``s`` runs along the road, ``n`` is the lateral
offset with ``n = 0`` at the centre of the right-most lane and lanes stacked
towards positive ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

REGIONS = ("f", "b", "l", "r")
N_REGIONS = 4
LANE_CLASSES = ("up", "down", "none")


@dataclass(frozen=True)
class EgoState:
    s: float
    n: float
    v_s: float
    v_n: float

    def to_array(self) -> np.ndarray:
        return np.array([self.s, self.n, self.v_s, self.v_n], dtype=float)

    @classmethod
    def from_array(cls, x) -> "EgoState":
        x = np.asarray(x, dtype=float)
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]))


@dataclass(frozen=True)
class Control:
    a_s: float
    a_n: float

    def to_array(self) -> np.ndarray:
        return np.array([self.a_s, self.a_n], dtype=float)


@dataclass(frozen=True)
class ModelParams:
    """Point-mass model, bounds and road geometry shared by every solver."""

    t_d: float = 0.2
    N: int = 20
    a_fric: float = 5.0
    kappa_max: float = 0.0
    alpha_lo: float = -0.3
    alpha_hi: float = 0.3
    lb_u: tuple = (-10.0, -5.0)
    ub_u: tuple = (3.0, 5.0)
    # n bounds are derived from the lane count, see ``state_bounds``
    lb_x: tuple = (-np.inf, -np.inf, 0.0, -np.inf)
    ub_x: tuple = (np.inf, np.inf, 30.0, np.inf)
    d_bnd: float = 1.0
    d_lane: float = 3.5
    n_lanes_max: int = 3
    n_obs_max: int = 5

    def __post_init__(self):
        if not self.t_d > 0:
            raise ValueError("t_d must be positive")
        if int(self.N) < 1:
            raise ValueError("N must be >= 1")
        if not np.all(np.asarray(self.lb_u) < np.asarray(self.ub_u)):
            raise ValueError("lb_u must be elementwise below ub_u")
        if not self.d_lane > 0:
            raise ValueError("d_lane must be positive")

    @property
    def T_f(self) -> float:
        return self.N * self.t_d

    def with_horizon(self, N: int) -> "ModelParams":
        return replace(self, N=int(N))

    def road_limits(self, n_lanes: int) -> tuple[float, float]:
        """Lateral extent of the paved road for ``n_lanes`` lanes."""
        lo = -0.5 * self.d_lane
        return lo, lo + n_lanes * self.d_lane

    def lane_center(self, lane: int) -> float:
        return lane * self.d_lane

    def lane_of(self, n: float, n_lanes: int) -> int:
        lane = int(np.floor(n / self.d_lane + 0.5))
        return int(np.clip(lane, 0, n_lanes - 1))

    def state_bounds(self, n_lanes: int) -> tuple[np.ndarray, np.ndarray]:
        lb = np.array(self.lb_x, dtype=float)
        ub = np.array(self.ub_x, dtype=float)
        lo, hi = self.road_limits(n_lanes)
        lb[1] = max(lb[1], lo + self.d_bnd)
        ub[1] = min(ub[1], hi - self.d_bnd)
        return lb, ub

    def control_bounds(self, v_s0: float) -> tuple[np.ndarray, np.ndarray]:
        lb = np.array(self.lb_u, dtype=float)
        ub = np.array(self.ub_u, dtype=float)
        lo_n, hi_n = lateral_accel_bounds(self.a_fric, self.kappa_max, v_s0)
        lb[1] = max(lb[1], lo_n)
        ub[1] = min(ub[1], hi_n)
        return lb, ub


@dataclass(frozen=True)
class ObstacleBounds:
    """Axis-aligned rectangle ``[s_b, s_f] x [n_r, n_l]`` in road coordinates."""

    s_f: float
    s_b: float
    n_l: float
    n_r: float

    def __post_init__(self):
        if not (self.s_f > self.s_b and self.n_l > self.n_r):
            raise ValueError(f"degenerate obstacle bounds {self}")

    def to_array(self) -> np.ndarray:
        return np.array([self.s_f, self.s_b, self.n_l, self.n_r], dtype=float)

    @classmethod
    def from_array(cls, d) -> "ObstacleBounds":
        d = np.asarray(d, dtype=float)
        return cls(float(d[0]), float(d[1]), float(d[2]), float(d[3]))

    @classmethod
    def around(cls, s: float, n: float, half_length: float, half_width: float):
        return cls(s + half_length, s - half_length, n + half_width, n - half_width)

    def contains(self, s: float, n: float) -> bool:
        return self.s_b < s < self.s_f and self.n_r < n < self.n_l


@dataclass(frozen=True, eq=False)
class ObstacleTrack:
    """Predicted rectangle per horizon step; ``bounds`` has shape (N+1, 4)."""

    bounds: np.ndarray
    v_obs: float = 0.0

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=float)
        if b.ndim != 2 or b.shape[1] != 4 or b.shape[0] < 2:
            raise ValueError("bounds must have shape (N+1, 4) with N >= 1")
        if np.any(b[:, 0] <= b[:, 1]) or np.any(b[:, 2] <= b[:, 3]):
            raise ValueError("obstacle track contains a degenerate rectangle")
        b.setflags(write=False)
        object.__setattr__(self, "bounds", b)

    @property
    def horizon(self) -> int:
        return self.bounds.shape[0] - 1

    @property
    def initial(self) -> ObstacleBounds:
        return ObstacleBounds.from_array(self.bounds[0])

    def __eq__(self, other):
        if not isinstance(other, ObstacleTrack):
            return NotImplemented
        return self.v_obs == other.v_obs and np.array_equal(self.bounds, other.bounds)

    def __hash__(self):
        return hash((self.v_obs, self.bounds.tobytes()))


@dataclass(frozen=True)
class PlannerParams:
    """Parameter set of one planning problem (ego state, speed, road, obstacles)."""

    x0: EgoState
    v_ref: float
    n_lanes: int
    obstacles: tuple = field(default_factory=tuple)
    lane0_ref: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if int(self.n_lanes) < 1:
            raise ValueError("n_lanes must be >= 1")
        for ob in self.obstacles:
            if not isinstance(ob, ObstacleTrack):
                raise TypeError("obstacles must be ObstacleTrack instances")

    @property
    def n_obs(self) -> int:
        return len(self.obstacles)

    @property
    def horizon(self) -> int | None:
        if not self.obstacles:
            return None
        return self.obstacles[0].horizon

    def validate(self, m: ModelParams) -> "PlannerParams":
        if not 1 <= self.n_lanes <= m.n_lanes_max:
            raise ValueError(f"n_lanes={self.n_lanes} outside [1, {m.n_lanes_max}]")
        if self.n_obs > m.n_obs_max:
            raise ValueError(f"{self.n_obs} obstacles exceed n_obs_max={m.n_obs_max}")
        if not np.all(np.isfinite(self.x0.to_array())):
            raise ValueError("ego state must be finite")
        for ob in self.obstacles:
            if ob.horizon != m.N:
                raise ValueError(
                    f"obstacle track has horizon {ob.horizon}, model expects {m.N}"
                )
        return self

    def permuted(self, order: Sequence[int]) -> "PlannerParams":
        return replace(self, obstacles=tuple(self.obstacles[i] for i in order))


def discretize_dynamics(t_d: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact zero-order-hold double integrator for ``x = [s, n, v_s, v_n]``."""
    if t_d < 0:
        raise ValueError("t_d must be non-negative")
    A = np.eye(4)
    A[0, 2] = A[1, 3] = t_d
    B = np.zeros((4, 2))
    B[0, 0] = B[1, 1] = 0.5 * t_d**2
    B[2, 0] = B[3, 1] = t_d
    return A, B


def lateral_accel_bounds(a_fric: float, kappa_max: float, v_s0: float):
    """Friction-limited lateral acceleration shifted by the centrifugal term."""
    c = kappa_max * v_s0**2
    return -a_fric + c, a_fric + c


def region_halfspaces(d, k: str) -> tuple[np.ndarray, np.ndarray]:
    """Half-space system ``A p <= b`` of collision-free region ``k`` around ``d``.

    ``f``: ahead of the rectangle, ``b``: behind it, ``l``/``r``: beside it
    within its longitudinal extent.
    """
    if isinstance(d, ObstacleBounds):
        s_f, s_b, n_l, n_r = d.s_f, d.s_b, d.n_l, d.n_r
    else:
        s_f, s_b, n_l, n_r = (float(v) for v in d)
    if k == "f":
        return np.array([[-1.0, 0.0]]), np.array([-s_f])
    if k == "b":
        return np.array([[1.0, 0.0]]), np.array([s_b])
    if k == "l":
        A = np.array([[0.0, -1.0], [1.0, 0.0], [-1.0, 0.0]])
        return A, np.array([-n_l, s_f, -s_b])
    if k == "r":
        A = np.array([[0.0, 1.0], [1.0, 0.0], [-1.0, 0.0]])
        return A, np.array([n_r, s_f, -s_b])
    raise ValueError(f"unknown region {k!r}; expected one of {REGIONS}")


def region_rows(bounds: np.ndarray, margins) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised halfspace rows for all regions of a stack of rectangles.

    Returns ``(A, b, sig)`` with shapes ``(8, 2)``, ``(..., 8)`` and ``(8,)``:
    rows 0 and 1 belong to ``f`` and ``b``, rows 2-4 to ``l``, rows 5-7 to ``r``.
    ``sig`` carries the safety margin of each row's region.
    """
    bounds = np.asarray(bounds, dtype=float)
    s_f, s_b, n_l, n_r = (bounds[..., i] for i in range(4))
    A = np.array(
        [[-1, 0], [1, 0], [0, -1], [1, 0], [-1, 0], [0, 1], [1, 0], [-1, 0]],
        dtype=float,
    )
    b = np.stack([-s_f, s_b, -n_l, s_f, -s_b, n_r, s_f, -s_b], axis=-1)
    sf, sb, sl, sr = (float(v) for v in margins)
    sig = np.array([sf, sb, sl, sl, sl, sr, sr, sr])
    return A, b, sig


ROW_REGION = np.array([0, 1, 2, 2, 2, 3, 3, 3])


@dataclass
class ViolationReport:
    control: float
    state: float
    ratio: float

    @property
    def max(self) -> float:
        return max(self.control, self.state, self.ratio)


def check_hard_constraints(X, U, params: ModelParams, n_lanes: int | None = None,
                           v_s0: float | None = None) -> ViolationReport:
    """Largest violation of control, state and velocity-ratio bounds."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if X.shape[1] != 4 or U.shape[1] != 2 or X.shape[0] != U.shape[0] + 1:
        raise ValueError(f"shape mismatch: X {X.shape}, U {U.shape}")
    if v_s0 is None:
        lb_u, ub_u = np.array(params.lb_u), np.array(params.ub_u)
    else:
        lb_u, ub_u = params.control_bounds(v_s0)
    if n_lanes is None:
        lb_x, ub_x = np.array(params.lb_x), np.array(params.ub_x)
    else:
        lb_x, ub_x = params.state_bounds(n_lanes)
    cv = np.maximum(U - ub_u, lb_u - U).max(initial=0.0)
    with np.errstate(invalid="ignore"):
        sv = np.nan_to_num(np.maximum(X - ub_x, lb_x - X), nan=0.0, neginf=0.0).max(initial=0.0)
    v_s, v_n = X[:, 2], X[:, 3]
    rv = np.maximum(v_n - params.alpha_hi * v_s, params.alpha_lo * v_s - v_n).max(initial=0.0)
    return ViolationReport(max(cv, 0.0), max(sv, 0.0), max(rv, 0.0))


def predict_obstacle_bounds(initial: ObstacleBounds, v_obs: float,
                            params: ModelParams) -> ObstacleTrack:
    """Constant-velocity propagation of the longitudinal bounds."""
    d0 = initial.to_array() if isinstance(initial, ObstacleBounds) else np.asarray(initial, float)
    shift = np.arange(params.N + 1) * params.t_d * v_obs
    bounds = np.repeat(d0[None, :], params.N + 1, axis=0)
    bounds[:, 0] += shift
    bounds[:, 1] += shift
    return ObstacleTrack(bounds, float(v_obs))


def reference_lateral(lane0_ref: float, Lambda, d_lane: float) -> np.ndarray:
    """Lane-centre reference sequence from lane-change decisions (N x 2)."""
    Lambda = np.asarray(Lambda, dtype=float).reshape(-1, 2)
    steps = d_lane * (Lambda[:, 0] - Lambda[:, 1])
    return lane0_ref + np.concatenate([[0.0], np.cumsum(steps)])


def rollout(x0, U, t_d: float) -> np.ndarray:
    """Simulate the double integrator for the controls ``U`` (N x 2)."""
    A, B = discretize_dynamics(t_d)
    U = np.asarray(U, dtype=float).reshape(-1, 2)
    X = np.empty((U.shape[0] + 1, 4))
    X[0] = np.asarray(x0, dtype=float)
    for i, u in enumerate(U):
        X[i + 1] = A @ X[i] + B @ u
    return X


VEHICLE_LENGTH = 5.39
VEHICLE_WIDTH = 2.07
# O^out half-extents are this factor times the collision rectangle's, so the
# ellipse through the collision rectangle's corners is inscribed in O^out
OUTER_SCALE = float(np.sqrt(2.0))


def outer_bounds(s: float, n: float, length: float = VEHICLE_LENGTH,
                 width: float = VEHICLE_WIDTH, ego_length: float = VEHICLE_LENGTH,
                 ego_width: float = VEHICLE_WIDTH) -> ObstacleBounds:
    """Outer rectangle for a point-mass ego around an obstacle centred at ``(s, n)``.

    The collision rectangle (obstacle grown by the ego half-dimensions) is
    scaled by ``OUTER_SCALE`` about its centre.
    """
    hl = 0.5 * OUTER_SCALE * (length + ego_length)
    hw = 0.5 * OUTER_SCALE * (width + ego_width)
    return ObstacleBounds.around(s, n, hl, hw)


def collision_bounds(d: ObstacleBounds | np.ndarray) -> np.ndarray:
    """Collision rectangle recovered from outer bounds (inverse of the scaling)."""
    d = d.to_array() if isinstance(d, ObstacleBounds) else np.asarray(d, float)
    c_s, c_n = 0.5 * (d[..., 0] + d[..., 1]), 0.5 * (d[..., 2] + d[..., 3])
    h_s = 0.5 * (d[..., 0] - d[..., 1]) / OUTER_SCALE
    h_n = 0.5 * (d[..., 2] - d[..., 3]) / OUTER_SCALE
    return np.stack([c_s + h_s, c_s - h_s, c_n + h_n, c_n - h_n], axis=-1)


def obstacle_track(s: float, n: float, v: float, params: ModelParams, **dims) -> ObstacleTrack:
    """Constant-velocity track of the outer rectangle of a vehicle at ``(s, n)``."""
    return predict_obstacle_bounds(outer_bounds(s, n, **dims), v, params)
