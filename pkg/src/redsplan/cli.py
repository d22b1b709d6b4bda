"""Command-line entry point: ``redsplan <command> [--config FILE] [--seed S] [--out DIR] ...``.

Every command reads an optional YAML mapping, applies command-line flags on
top and writes ``report.json``, ``samples.csv`` and ``timings.csv`` into the
output directory. Files are staged and only moved into place on success.
Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import time
import zlib
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

log = logging.getLogger("redsplan")


class ConfigError(ValueError):
    pass


# -- configuration --------------------------------------------------------------------

# command -> key -> (type, default, help)
SCHEMA: dict[str, dict[str, tuple]] = {
    "gen-data": {
        "n": (int, 100, "number of labeled samples"),
        "horizon": (int, 20, "planning steps N"),
        "n_obs": (list, [1, 3], "obstacle count range [lo, hi]"),
        "n_lanes": (list, [1, 3], "lane count range [lo, hi]"),
        "time_limit": (float, 30.0, "expert time limit per sample [s]"),
    },
    "train": {
        "data": (str, None, "training dataset (JSON lines)"),
        "n_e": (int, 1, "ensemble members to train"),
        "arch": (str, "reds", "reds, eds, ff or lstm"),
        "hidden": (int, 32, "hidden width"),
        "layers": (int, 2, "encoder layers"),
        "lr": (float, 2e-3, "learning rate"),
        "batch_size": (int, 64, "minibatch size"),
        "epochs": (int, 60, "training epochs"),
        "weight_decay": (float, 1e-5, "decoupled weight decay"),
    },
    "eval-open": {
        "data": (str, None, "labeled test dataset"),
        "models": (list, None, "model files of the ensemble"),
        "project": (bool, True, "run the feasibility projector"),
    },
    "simulate": {
        "scenario": (str, "sparse", "sparse or dense"),
        "episodes": (int, 10, "episodes to run"),
        "duration": (float, 30.0, "episode length [s]"),
        "planner": (str, "expert", "expert or reds"),
        "models": (list, None, "model files (reds planner)"),
        "horizon": (int, 20, "planning steps N"),
        "n_lanes": (int, 3, "lanes"),
        "traj": (bool, False, "write per-episode trajectory logs"),
    },
    "bench": {
        "n": (int, 50, "instances"),
        "horizon": (int, 50, "planning steps N"),
        "n_obs": (int, 5, "obstacles per instance"),
        "models": (list, None, "model files; untrained members when omitted"),
        "n_e": (int, 3, "untrained members when no models are given"),
        "time_limit": (float, 120.0, "expert time limit per instance [s]"),
    },
    "selftest": {},
}
COMMON = {"seed": (int, 0, "root seed"), "out": (str, "out", "output directory"),
          "jobs": (int, 1, "worker processes")}


def _coerce(key: str, typ, value):
    if value is None:
        return None
    try:
        if typ is bool:
            if isinstance(value, str):
                low = value.lower()
                if low not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(value)
                return low in ("1", "true", "yes")
            return bool(value)
        if typ is list:
            if isinstance(value, str):
                value = [v for v in value.split(",") if v]
            return list(value)
        return typ(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: cannot read {value!r} as {typ.__name__}") from e


def load_config(command: str, path: str | None, flags: dict) -> dict:
    """Defaults < YAML file < command-line flags; unknown keys are rejected."""
    schema = {**COMMON, **SCHEMA[command]}
    cfg = {k: v[1] for k, v in schema.items()}
    if path:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        # a file may hold sections per command
        if command in data and isinstance(data[command], dict):
            data = {**{k: v for k, v in data.items() if k not in SCHEMA}, **data[command]}
        unknown = sorted(set(data) - set(schema))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {unknown}")
        cfg.update(data)
    for k, v in flags.items():
        if v is not None:
            cfg[k] = v
    return {k: _coerce(k, schema[k][0], v) for k, v in cfg.items()}


def substream(root: int, name: str) -> int:
    """Seed of the named random substream derived from the root seed."""
    ss = np.random.SeedSequence([root, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# -- output helpers -------------------------------------------------------------------


def _write_csv(path: Path, rows: list[dict]) -> None:
    keys: list = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=keys)
        wr.writeheader()
        wr.writerows(rows)


def _write_outputs(stage: Path, report: dict, samples: list, timings: list) -> None:
    (stage / "report.json").write_text(json.dumps(report, indent=2, default=_jsonable))
    _write_csv(stage / "samples.csv", samples)
    _write_csv(stage / "timings.csv", timings)


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _require(cfg: dict, *keys):
    for k in keys:
        if cfg.get(k) in (None, [], ""):
            raise ConfigError(f"missing required setting {k!r}")


def _stats(a) -> dict:
    a = np.asarray(a, float)
    if not a.size:
        return {}
    return {"median": float(np.median(a)), "mean": float(a.mean()), "max": float(a.max())}


# -- commands -------------------------------------------------------------------------


def cmd_gen_data(cfg: dict, stage: Path) -> str:
    from .core import ModelParams
    from .datagen import SampleRanges, generate_dataset, write_dataset
    from .miqp import BnbOptions, MiqpWeights

    if cfg["n"] < 1 or cfg["horizon"] < 1:
        raise ConfigError("n and horizon must be positive")
    try:
        ranges = SampleRanges(n_obs=tuple(int(v) for v in cfg["n_obs"]),
                              n_lanes=tuple(int(v) for v in cfg["n_lanes"]))
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    m = ModelParams(N=cfg["horizon"])
    ds = generate_dataset(cfg["n"], ranges, m, MiqpWeights(), substream(cfg["seed"], "datagen"),
                          BnbOptions(time_limit=cfg["time_limit"]), jobs=cfg["jobs"])
    manifest = write_dataset(ds, stage / "dataset.jsonl")
    samples = [{"index": i, "n_obs": r.params.n_obs, "n_lanes": r.params.n_lanes, "J_e": r.J_e,
                "nodes": r.meta.get("nodes")} for i, r in enumerate(ds)]
    timings = [{"index": i, "t_miqp": r.meta.get("t_miqp")} for i, r in enumerate(ds)]
    _write_outputs(stage, {"command": "gen-data", "config": cfg, "manifest": manifest,
                           "t_miqp": _stats([t["t_miqp"] for t in timings])}, samples, timings)
    return f"{len(ds)} samples, hash {manifest['hash'][:12]}"


def cmd_train(cfg: dict, stage: Path) -> str:
    from .datagen import read_dataset
    from .reds import RedsClassifier

    _require(cfg, "data")
    ds = read_dataset(cfg["data"])
    if not len(ds):
        raise ConfigError("training dataset is empty")
    if cfg["n_e"] < 1:
        raise ConfigError("n_e must be >= 1")
    if cfg["arch"] not in ("reds", "eds", "ff", "lstm"):
        raise ConfigError(f"unknown arch {cfg['arch']!r}")
    members, samples, timings = [], [], []
    for i in range(cfg["n_e"]):
        clf = RedsClassifier(arch=cfg["arch"], hidden=cfg["hidden"], layers=cfg["layers"],
                             in_hidden=cfg["hidden"], out_hidden=cfg["hidden"], lr=cfg["lr"],
                             batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                             weight_decay=cfg["weight_decay"],
                             seed=substream(cfg["seed"], f"train/member-{i}"))
        clf.fit(ds.params, ds.labels)
        name = f"model_{i}.npz"
        clf.save(stage / name)
        acc = clf.score(ds.params, ds.labels)
        members.append({"file": name, "seed": clf.seed, "train_accuracy": acc,
                        "final_loss": clf.loss_history_[-1]})
        samples.extend({"member": i, "epoch": e + 1, "loss": v}
                       for e, v in enumerate(clf.loss_history_))
        timings.append({"member": i, "t_train": clf.train_time_})
    _write_outputs(stage, {"command": "train", "config": cfg, "members": members},
                   samples, timings)
    return f"{cfg['n_e']} member(s), train accuracy " + \
        ", ".join(f"{m['train_accuracy']:.3f}" for m in members)


def _ensemble(paths):
    from .planner import Ensemble

    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        raise ConfigError(f"model files not found: {missing}")
    return Ensemble.load(paths)


def cmd_eval_open(cfg: dict, stage: Path) -> str:
    from .datagen import read_dataset
    from .planner import eval_open_loop

    _require(cfg, "data", "models")
    ds = read_dataset(cfg["data"])
    if not len(ds):
        raise ConfigError("test dataset is empty")
    rep = eval_open_loop(ds.records, _ensemble(cfg["models"]), m=ds.model,
                         project=cfg["project"])
    timing_cols = ("index", "t_serial", "t_parallel", "t_fp")
    _write_outputs(stage, {"command": "eval-open", "config": cfg, **rep.summary()}, rep.rows,
                   [{k: r[k] for k in timing_cols} for r in rep.rows])
    return (f"misclassified {rep.cumulative_misclass[-1]:.3f}, infeasible "
            f"{rep.infeasible_pre_fp:.3f} -> {rep.infeasible_post_fp:.3f} after projection")


def cmd_simulate(cfg: dict, stage: Path) -> str:
    from .core import ModelParams
    from .simenv import ExpertPlanner, LearnedPlanner, PRESETS, preset, run_episode

    if cfg["scenario"] not in PRESETS:
        raise ConfigError(f"unknown scenario {cfg['scenario']!r}")
    if cfg["planner"] not in ("expert", "reds"):
        raise ConfigError(f"unknown planner {cfg['planner']!r}")
    if cfg["episodes"] < 1:
        raise ConfigError("episodes must be >= 1")
    if cfg["planner"] == "reds":
        _require(cfg, "models")
        planner = LearnedPlanner(_ensemble(cfg["models"]))
    else:
        planner = ExpertPlanner()
    m = ModelParams(N=cfg["horizon"])
    samples, timings = [], []
    for j in range(cfg["episodes"]):
        ep_cfg = preset(cfg["scenario"], duration=cfg["duration"], n_lanes=cfg["n_lanes"],
                        seed=substream(cfg["seed"], f"sim/episode-{j}"))
        t0 = time.perf_counter()
        met, lg = run_episode(ep_cfg, planner, m, keep_log=cfg["traj"])
        d = met.to_dict()
        samples.append({"episode": j, "seed": ep_cfg.seed, "collisions": d["collisions"],
                        "mean_velocity": d["mean_velocity"], "min_velocity": d["min_velocity"],
                        "lane_changes": d["lane_changes"], "cost": d["cost"],
                        "fallbacks": d["fallbacks"], "certified_rate": d["certified_rate"]})
        timings.append({"episode": j, "wall_time": time.perf_counter() - t0,
                        **{f"plan_{k}": v for k, v in d["plan_time"].items()}})
        if cfg["traj"]:
            lg.write_csv(stage / f"traj_{j}.csv")
    agg = {k: float(np.mean([s[k] for s in samples]))
           for k in ("mean_velocity", "cost", "lane_changes", "fallbacks")}
    agg["collisions"] = int(sum(s["collisions"] for s in samples))
    agg["min_velocity"] = float(min(s["min_velocity"] for s in samples))
    _write_outputs(stage, {"command": "simulate", "config": cfg, "summary": agg}, samples, timings)
    return (f"{cfg['episodes']} episode(s), collisions {agg['collisions']}, "
            f"mean cost {agg['cost']:.1f}")


def cmd_bench(cfg: dict, stage: Path) -> str:
    from .core import ModelParams
    from .datagen import SampleRanges, sample_parameters
    from .miqp import BnbOptions, MiqpWeights, build_miqp, solve_bnb
    from .planner import Ensemble, plan
    from .reds import RedsClassifier

    if cfg["n"] < 1 or cfg["horizon"] < 1 or cfg["n_obs"] < 0:
        raise ConfigError("n and horizon must be positive, n_obs non-negative")
    m = ModelParams(N=cfg["horizon"])
    w = MiqpWeights()
    if cfg["models"]:
        ens = _ensemble(cfg["models"])
    else:
        ens = Ensemble([RedsClassifier(hidden=32, layers=2, in_hidden=32, out_hidden=32,
                                       seed=substream(cfg["seed"], f"train/member-{i}"))
                        .init(cfg["horizon"]) for i in range(cfg["n_e"])])
    rng = np.random.default_rng(substream(cfg["seed"], "bench"))
    ranges = SampleRanges(n_obs=(cfg["n_obs"], cfg["n_obs"]))
    rows = []
    for i in range(cfg["n"]):
        pi = sample_parameters(rng, ranges, m)
        sol = solve_bnb(build_miqp(pi, w, m), BnbOptions(time_limit=cfg["time_limit"]))
        res = plan(pi, ens, w, m)
        rows.append({"index": i, "status_miqp": sol.status, "nodes": sol.node_count,
                     "t_MIQP": sol.wall_time, "t_NN": float(np.sum(res.t_nn)),
                     "t_QP": float(np.sum(res.t_qp)), "t_QP_median": float(np.median(res.t_qp)),
                     "t_FP": res.t_fp, "t_s": res.t_serial, "t_p": res.t_parallel,
                     "certified": res.certified})
    med = {k: float(np.median([r[k] for r in rows]))
           for k in ("t_MIQP", "t_NN", "t_QP", "t_QP_median", "t_FP", "t_s", "t_p")}
    samples = [{k: r[k] for k in ("index", "status_miqp", "nodes", "certified")} for r in rows]
    timings = [{k: v for k, v in r.items() if k.startswith("t_") or k == "index"} for r in rows]
    _write_outputs(stage, {"command": "bench", "config": cfg, "median": med}, samples, timings)
    return (f"median t_MIQP {med['t_MIQP'] * 1e3:.1f} ms, t_QP {med['t_QP_median'] * 1e3:.1f} ms, "
            f"t_p {med['t_p'] * 1e3:.1f} ms")


def cmd_selftest(cfg: dict, stage: Path) -> str:
    from .checks import run_checks

    results = run_checks(cfg["seed"])
    failed = [r for r in results if not r["passed"]]
    _write_outputs(stage, {"command": "selftest", "passed": not failed, "checks": results},
                   results, [{"check": r["name"], "seconds": r["seconds"]} for r in results])
    if failed:
        raise RuntimeError("self-test failed: " + ", ".join(r["name"] for r in failed))
    return f"{len(results)} checks passed"


COMMANDS: dict[str, Callable[[dict, Path], str]] = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval-open": cmd_eval_open,
    "simulate": cmd_simulate, "bench": cmd_bench, "selftest": cmd_selftest,
}


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="redsplan", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMA.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML file with settings")
        for key, (typ, _, help_) in {**COMMON, **schema}.items():
            flag = "--" + key.replace("_", "-")
            sp.add_argument(flag, dest=key, default=None, help=help_,
                            nargs="+" if typ is list else None)
    return ap


def run_cli(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("REDSPLAN_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 2
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = load_config(args.command, args.config, flags)
    except ConfigError as e:
        print(f"redsplan {args.command}: invalid input: {e}", file=sys.stderr)
        return 2
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        stage = Path(out, f".partial-{os.getpid()}")
        stage.mkdir()
    except OSError as e:
        print(f"redsplan {args.command}: invalid input: output directory: {e}", file=sys.stderr)
        return 2
    code = 0
    try:
        msg = COMMANDS[args.command](cfg, stage)
        for f in stage.iterdir():
            os.replace(f, out / f.name)
        print(f"redsplan {args.command}: ok: {msg}")
    except ConfigError as e:
        print(f"redsplan {args.command}: invalid input: {e}", file=sys.stderr)
        code = 2
    except Exception as e:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"redsplan {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        code = 1
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return code


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
