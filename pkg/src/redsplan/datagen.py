"""Random planning problems, expert labels and dataset files.

A dataset is a JSON-lines file with one record per labeled problem plus a
manifest holding the sampling ranges, seed, counts and a content hash.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    VEHICLE_LENGTH,
    VEHICLE_WIDTH,
    EgoState,
    ModelParams,
    ObstacleTrack,
    PlannerParams,
    obstacle_track,
    predict_obstacle_bounds,
)
from .miqp import BinaryAssignment, BnbOptions, MiqpWeights, build_miqp, extract_labels, solve_bnb

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class SampleRanges:
    n_lanes: tuple = (1, 3)
    n_obs: tuple = (1, 5)
    obs_s: tuple = (-120.0, 200.0)
    v_s: tuple = (0.0, 30.0)
    v_n: tuple = (-1.0, 1.0)
    v_ref: tuple = (15.0, 15.0)
    # lateral positions cover the road; the ego keeps d_bnd from its edges
    obs_lengths: tuple = (VEHICLE_LENGTH, VEHICLE_LENGTH)
    obs_widths: tuple = (VEHICLE_WIDTH, VEHICLE_WIDTH)

    def __post_init__(self):
        for name, (lo, hi) in asdict(self).items():
            if lo > hi:
                raise ValueError(f"range {name} has lo > hi: {(lo, hi)}")
        if self.n_lanes[0] < 1 or self.n_obs[0] < 0:
            raise ValueError("lane count must be >= 1 and obstacle count >= 0")

    def with_(self, **kw) -> "SampleRanges":
        d = asdict(self)
        d.update({k: tuple(v) for k, v in kw.items()})
        return SampleRanges(**d)


class SamplingError(RuntimeError):
    pass


def _uniform(rng: np.random.Generator, r) -> float:
    lo, hi = r
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _integer(rng: np.random.Generator, r) -> int:
    lo, hi = r
    return int(lo) if lo == hi else int(rng.integers(lo, hi + 1))


def sample_parameters(rng: np.random.Generator, ranges: SampleRanges, m: ModelParams,
                      max_tries: int = 100) -> PlannerParams:
    """Uniform draw of a planning problem.

    An obstacle whose outer rectangle would contain the ego at the initial
    time is redrawn, at most ``max_tries`` times.
    """
    L = _integer(rng, ranges.n_lanes)
    lo, hi = m.road_limits(L)
    n0 = _uniform(rng, (lo + m.d_bnd, hi - m.d_bnd))
    x0 = EgoState(0.0, n0, _uniform(rng, ranges.v_s), _uniform(rng, ranges.v_n))
    v_ref = _uniform(rng, ranges.v_ref)
    J = _integer(rng, ranges.n_obs)
    obs = []
    for _ in range(J):
        for _ in range(max_tries):
            tr = obstacle_track(_uniform(rng, ranges.obs_s), _uniform(rng, (lo, hi)),
                                _uniform(rng, ranges.v_s), m,
                                length=_uniform(rng, ranges.obs_lengths),
                                width=_uniform(rng, ranges.obs_widths))
            if not tr.initial.contains(x0.s, x0.n):
                break
        else:
            raise SamplingError(f"no non-overlapping obstacle after {max_tries} draws")
        obs.append(tr)
    return PlannerParams(x0, v_ref, L, tuple(obs), m.lane_center(m.lane_of(n0, L)))


# -- serialization -------------------------------------------------------------


def params_to_dict(pi: PlannerParams) -> dict:
    return {
        "x0": pi.x0.to_array().tolist(),
        "v_ref": float(pi.v_ref),
        "n_lanes": int(pi.n_lanes),
        "lane0_ref": float(pi.lane0_ref),
        "obstacles": [{"d0": ob.bounds[0].tolist(), "v": float(ob.v_obs)} for ob in pi.obstacles],
    }


def params_from_dict(d: dict, m: ModelParams) -> PlannerParams:
    """Rebuild ``pi``; obstacle tracks are re-propagated over ``m.N`` steps."""
    obs = tuple(predict_obstacle_bounds(np.asarray(o["d0"], float), o["v"], m)
                for o in d["obstacles"])
    return PlannerParams(EgoState.from_array(d["x0"]), d["v_ref"], d["n_lanes"], obs,
                         d["lane0_ref"])


def with_horizon(pi: PlannerParams, m: ModelParams) -> PlannerParams:
    """Same problem with obstacle tracks re-propagated to the horizon of ``m``."""
    obs = tuple(predict_obstacle_bounds(ob.bounds[0], ob.v_obs, m) for ob in pi.obstacles)
    return PlannerParams(pi.x0, pi.v_ref, pi.n_lanes, obs, pi.lane0_ref)


# metadata that varies between otherwise identical runs
TIMING_KEYS = frozenset({"t_miqp"})


@dataclass
class Record:
    params: PlannerParams
    labels: BinaryAssignment
    J_e: float
    meta: dict = field(default_factory=dict)

    def to_json(self, timings: bool = True) -> str:
        meta = self.meta if timings else {k: v for k, v in self.meta.items()
                                          if k not in TIMING_KEYS}
        return json.dumps({"params": params_to_dict(self.params),
                           "lane": self.labels.lane_classes.tolist(),
                           "region": self.labels.region_classes.tolist(),
                           "J_e": self.J_e, "meta": meta}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str, m: ModelParams) -> "Record":
        d = json.loads(line)
        N = len(d["lane"])
        pi = params_from_dict(d["params"], m.with_horizon(N))
        region = np.asarray(d["region"], int).reshape(N + 1, pi.n_obs)
        return cls(pi, BinaryAssignment.from_classes(d["lane"], region).validate(), d["J_e"],
                   d.get("meta", {}))


@dataclass
class Dataset:
    records: list
    model: ModelParams
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.records[i], self.model, dict(self.manifest))
        return self.records[i]

    @property
    def params(self) -> list:
        return [r.params for r in self.records]

    @property
    def labels(self) -> list:
        return [r.labels for r in self.records]

    def content_hash(self) -> str:
        """Digest of the records without wall-clock measurements."""
        h = hashlib.sha256()
        for r in self.records:
            h.update(r.to_json(timings=False).encode())
            h.update(b"\n")
        return h.hexdigest()

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self[:n_first], self[n_first:]

    def filter(self, pred) -> "Dataset":
        return Dataset([r for r in self.records if pred(r)], self.model, dict(self.manifest))

    def __add__(self, other: "Dataset") -> "Dataset":
        return Dataset(self.records + other.records, self.model, {})


def model_to_dict(m: ModelParams) -> dict:
    d = asdict(m)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def model_from_dict(d: dict) -> ModelParams:
    return ModelParams(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def _json_default(o):
    if isinstance(o, float) and not np.isfinite(o):
        return str(o)
    raise TypeError(type(o))


def write_dataset(ds: Dataset, path: str | Path) -> dict:
    """Write ``<path>`` (JSON lines) and ``<path>.manifest.json``; returns the manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [r.to_json() for r in ds.records]
    path.write_text("".join(line + "\n" for line in lines))
    manifest = dict(ds.manifest)
    manifest.update({"format_version": FORMAT_VERSION, "count": len(ds),
                     "hash": ds.content_hash(), "model": model_to_dict(ds.model)})
    Path(str(path) + ".manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return manifest


def read_dataset(path: str | Path, m: ModelParams | None = None) -> Dataset:
    path = Path(path)
    mpath = Path(str(path) + ".manifest.json")
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    if manifest.get("format_version", FORMAT_VERSION) > FORMAT_VERSION:
        raise ValueError(f"dataset format {manifest['format_version']} is newer than supported")
    if m is None:
        m = model_from_dict(manifest["model"]) if "model" in manifest else ModelParams()
    recs = [Record.from_json(line, m) for line in path.read_text().splitlines() if line.strip()]
    return Dataset(recs, m, manifest)


# -- labeling ----------------------------------------------------------------------


def label(pi: PlannerParams, m: ModelParams, w: MiqpWeights,
          opts: BnbOptions | None = None) -> tuple[BinaryAssignment, float, dict] | None:
    """Expert labels of ``pi``, or None when the expert finds no optimal solution."""
    sol = solve_bnb(build_miqp(pi, w, m), opts or BnbOptions())
    if sol.status != "optimal":
        return None
    b = extract_labels(sol)
    return b, float(sol.objective), {"nodes": sol.node_count, "t_miqp": sol.wall_time}


def _label_one(args):
    seed, index, ranges, m, w, opts, max_attempts = args
    fails = 0
    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, index, attempt])
        try:
            pi = sample_parameters(rng, ranges, m)
        except SamplingError:
            fails += 1
            continue
        out = label(pi, m, w, opts)
        if out is None:
            fails += 1
            continue
        b, J, info = out
        meta = {"seed": seed, "index": index, "attempt": attempt, "N": m.N, "n_obs": pi.n_obs,
                **info}
        return Record(pi, b, J, meta), fails
    return None, fails


def generate_dataset(n: int, ranges: SampleRanges, m: ModelParams, w: MiqpWeights | None = None,
                     seed: int = 0, opts: BnbOptions | None = None, jobs: int = 1,
                     max_attempts: int = 20) -> Dataset:
    """Label ``n`` sampled problems with the expert.

    Sample ``i`` is drawn from a generator seeded by ``(seed, i, attempt)``,
    so the result does not depend on ``jobs``. Samples the expert cannot
    solve are redrawn; the run aborts if more than half of all attempts fail.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    w = w or MiqpWeights()
    opts = opts or BnbOptions()
    t0 = time.perf_counter()
    tasks = [(seed, i, ranges, m, w, opts, max_attempts) for i in range(n)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_label_one, tasks, chunksize=8))
    else:
        results = [_label_one(t) for t in tasks]
    recs = [r for r, _ in results if r is not None]
    fails = sum(f for _, f in results)
    if fails > len(recs) or len(recs) < n:
        raise RuntimeError(f"expert failed on {fails} of {fails + len(recs)} attempts; "
                           f"{len(recs)}/{n} samples labeled")
    manifest = {"ranges": asdict(ranges), "seed": seed, "requested": n, "failed_attempts": fails,
                "weights": asdict(w)}
    log.info("labeled %d samples (%d failed attempts) in %.1fs", n, fails,
             time.perf_counter() - t0)
    return Dataset(recs, m, manifest)


def harvest_from_sim(snapshots: Iterable[PlannerParams], m: ModelParams,
                     w: MiqpWeights | None = None, opts: BnbOptions | None = None) -> Dataset:
    """Expert-label planning problems encountered in closed loop."""
    w = w or MiqpWeights()
    recs = []
    for k, pi in enumerate(snapshots):
        pi = with_horizon(pi, m) if pi.horizon not in (None, m.N) else pi
        out = label(pi, m, w, opts)
        if out is None:
            continue
        b, J, info = out
        recs.append(Record(pi, b, J, {"index": k, "N": m.N, "n_obs": pi.n_obs, "source": "sim",
                                      **info}))
    return Dataset(recs, m, {"source": "sim", "count": len(recs)})


def cached_dataset(path: str | Path, n: int, ranges: SampleRanges, m: ModelParams,
                   w: MiqpWeights | None = None, seed: int = 0, **kw) -> Dataset:
    """Read ``path`` if its manifest matches the request, otherwise generate and write it."""
    path = Path(path)
    w = w or MiqpWeights()
    mpath = Path(str(path) + ".manifest.json")
    if path.exists() and mpath.exists():
        man = json.loads(mpath.read_text())
        want = json.loads(json.dumps({"ranges": asdict(ranges), "seed": seed, "requested": n,
                                      "weights": asdict(w), "model": model_to_dict(m)},
                                     default=str))
        if all(man.get(k) == v for k, v in want.items()):
            return read_dataset(path, m)
    ds = generate_dataset(n, ranges, m, w, seed, **kw)
    write_dataset(ds, path)
    return ds


def obstacle_features(ob: ObstacleTrack, ego_s: float) -> np.ndarray:
    """Initial state and size ``[ds, n, v_s, v_n, length, width]`` of an outer rectangle."""
    d = ob.bounds[0]
    return np.array([0.5 * (d[0] + d[1]) - ego_s, 0.5 * (d[2] + d[3]), ob.v_obs, 0.0,
                     d[0] - d[1], d[2] - d[3]])


def subsets_by_obstacles(ds: Dataset, counts: Sequence[int]) -> Dataset:
    counts = set(counts)
    return ds.filter(lambda r: r.params.n_obs in counts)
