"""Learned planner: ensemble prediction, soft-QP scoring, selection, projection.

Every ensemble member predicts a binary assignment; each is scored by the
soft-QP, the cheapest trajectory wins (ties go to the lowest member index)
and the feasibility projector moves it out of the obstacle ellipses.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ModelParams, PlannerParams
from .fproj import FpSolution, FpWeights, project_plan
from .miqp import BinaryAssignment, MiqpWeights, build_miqp
from .reds import RedsClassifier, featurize, predict_binaries, predict_logits, sample_accuracy
from .softqp import SoftQpSolution, solve_soft_qp, suboptimality


@dataclass
class Ensemble:
    members: list

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")

    @property
    def n_e(self) -> int:
        return len(self.members)

    @property
    def seeds(self) -> list:
        return [getattr(mem, "seed", None) for mem in self.members]

    def head(self, k: int) -> "Ensemble":
        return Ensemble(self.members[:k])

    def predict(self, pi: PlannerParams, N: int) -> list[tuple[BinaryAssignment, float]]:
        """Each member's assignment and its wall-clock prediction time."""
        f = [featurize(pi)]
        out = []
        for mem in self.members:
            t0 = time.perf_counter()
            rl, ll = predict_logits(mem.net_, f, N)[0]
            b = predict_binaries(rl, ll)
            out.append((b, time.perf_counter() - t0))
        return out

    @classmethod
    def load(cls, paths: Sequence[str | Path]) -> "Ensemble":
        return cls([RedsClassifier.load(p) for p in paths])


@dataclass
class PlanResult:
    status: str
    chosen: int
    costs: np.ndarray
    predictions: list
    candidates: list
    X_nn: np.ndarray | None
    U_nn: np.ndarray | None
    X_s: np.ndarray | None
    U_s: np.ndarray | None
    certified: bool
    fp: FpSolution | None
    t_nn: np.ndarray
    t_qp: np.ndarray
    t_fp: float

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def selected(self) -> SoftQpSolution | None:
        return self.candidates[self.chosen] if self.chosen >= 0 else None

    @property
    def t_serial(self) -> float:
        return float(np.sum(self.t_nn + self.t_qp) + self.t_fp)

    @property
    def t_parallel(self) -> float:
        return float(np.max(self.t_nn + self.t_qp) + self.t_fp)


def select(costs: Sequence[float]) -> int:
    """Index of the lowest finite cost, the first one on ties; -1 if none is finite."""
    best, idx = math.inf, -1
    for i, c in enumerate(costs):
        if c < best:
            best, idx = c, i
    return idx


def plan(pi: PlannerParams, ens: Ensemble, w: MiqpWeights | None = None,
         m: ModelParams | None = None, fp_weights: FpWeights | None = None, *,
         project: bool = True, backend: str = "clarabel") -> PlanResult:
    m = m or ModelParams()
    w = w or MiqpWeights()
    pi.validate(m)
    inst = build_miqp(pi, w, m)
    preds = ens.predict(pi, m.N)
    cands, t_qp = [], []
    for b, _ in preds:
        sq = solve_soft_qp(inst, b, backend=backend)
        cands.append(sq)
        t_qp.append(sq.wall_time)
    costs = np.array([c.objective for c in cands])
    t_nn = np.array([t for _, t in preds])
    t_qp = np.array(t_qp)
    k = select(costs)
    if k < 0:
        return PlanResult("all_candidates_failed", -1, costs, [b for b, _ in preds], cands,
                          None, None, None, None, False, None, t_nn, t_qp, 0.0)
    sel = cands[k]
    fp = None
    X_s, U_s, cert, t_fp = sel.X, sel.U, False, 0.0
    if project:
        fp = project_plan(pi, sel.X, sel.U, m, fp_weights)
        X_s, U_s, cert, t_fp = fp.X, fp.U, fp.certified, fp.wall_time
    return PlanResult("ok", k, costs, [b for b, _ in preds], cands, sel.X, sel.U, X_s, U_s,
                      cert, fp, t_nn, t_qp, t_fp)


# -- open-loop evaluation ----------------------------------------------------------


def _pct(a, qs=(50, 90, 99, 100)) -> dict:
    a = np.asarray(a, float)
    if not a.size:
        return {f"p{q}": None for q in qs}
    return {f"p{q}": float(np.percentile(a, q)) for q in qs}


def pearson(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.size < 2 or np.std(a) == 0 or np.std(b) == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


@dataclass
class EvalReport:
    n_samples: int
    n_members: int
    member_misclass: list
    member_infeasible: list
    member_any_slack: list
    cumulative_misclass: list
    cumulative_infeasible: list
    infeasible_pre_fp: float
    infeasible_post_fp: float
    repaired_by_fp: int
    suboptimality: dict
    pcc: float
    timing: dict
    rows: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "rows"}
        return json.loads(json.dumps(d, default=float))

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2))

    def to_csv(self, path: str | Path) -> None:
        if not self.rows:
            Path(path).write_text("")
            return
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            wr.writeheader()
            wr.writerows(self.rows)


def eval_open_loop(records: Sequence, ens: Ensemble, w: MiqpWeights | None = None,
                   m: ModelParams | None = None, *, project: bool = True,
                   backend: str = "clarabel", predictions: list | None = None) -> EvalReport:
    """Score ``ens`` on expert-labeled records (objects with ``params``, ``labels``, ``J_e``).

    A sample counts as misclassified if any of its binaries is wrong. A
    candidate is infeasible if some slack of its soft-QP exceeds one. The
    cumulative rates for ``k`` members count a sample as good if any of
    the first ``k`` members is. ``predictions`` may supply the members'
    assignments per record instead of running the networks.
    """
    if not len(records):
        raise ValueError("empty dataset")
    w = w or MiqpWeights()
    m0 = m or ModelParams()
    n_e = ens.n_e
    wrong = np.zeros((len(records), n_e), bool)
    infeas = np.zeros((len(records), n_e), bool)
    slack = np.zeros((len(records), n_e), bool)
    acc = np.zeros((len(records), n_e))
    pre, post, repaired = [], [], 0
    rhos, rows = [], []
    t_nn, t_qp, t_fp, t_s, t_p, t_miqp = [], [], [], [], [], []
    for i, rec in enumerate(records):
        pi, lab = rec.params, rec.labels
        m = m0.with_horizon(lab.N)
        inst = build_miqp(pi, w, m)
        if predictions is None:
            preds = ens.predict(pi, lab.N)
        else:
            preds = [(b, 0.0) for b in predictions[i]]
        cands = [solve_soft_qp(inst, b, backend=backend) for b, _ in preds]
        for k, ((b, _), c) in enumerate(zip(preds, cands)):
            wrong[i, k] = b != lab
            infeas[i, k] = not c.feasible
            slack[i, k] = c.any_slack or not c.ok
            acc[i, k] = sample_accuracy(b, lab)
        costs = [c.objective for c in cands]
        k = select(costs)
        sel = cands[k] if k >= 0 else None
        pre_inf = sel is None or not sel.feasible
        cert = False
        tf = 0.0
        if sel is not None and project:
            fp = project_plan(pi, sel.X, sel.U, m)
            cert, tf = fp.certified, fp.wall_time
        post_inf = not cert if project else pre_inf
        repaired += int(pre_inf and not post_inf)
        pre.append(pre_inf)
        post.append(post_inf)
        rho = suboptimality(sel.objective, rec.J_e) if sel is not None and sel.feasible \
            and rec.J_e > 0 else None
        if rho is not None:
            rhos.append(rho)
        tn = np.array([t for _, t in preds])
        tq = np.array([c.wall_time for c in cands])
        t_nn.extend(tn)
        t_qp.extend(tq)
        t_fp.append(tf)
        t_s.append(float(np.sum(tn + tq) + tf))
        t_p.append(float(np.max(tn + tq) + tf))
        if "t_miqp" in getattr(rec, "meta", {}):
            t_miqp.append(rec.meta["t_miqp"])
        rows.append({"index": i, "n_obs": pi.n_obs, "n_lanes": pi.n_lanes, "J_e": rec.J_e,
                     "chosen": k, "J_s": sel.objective if sel else float("inf"),
                     "misclassified_all": bool(wrong[i].all()), "infeasible_pre_fp": pre_inf,
                     "infeasible_post_fp": post_inf, "rho": rho,
                     "accuracy_best": float(acc[i].max()), "t_serial": t_s[-1],
                     "t_parallel": t_p[-1], "t_fp": tf})
    n = len(records)
    cum_wrong = [float(np.mean(wrong[:, :k].all(axis=1))) for k in range(1, n_e + 1)]
    cum_inf = [float(np.mean(infeas[:, :k].all(axis=1))) for k in range(1, n_e + 1)]
    r = np.asarray(rhos)
    sub = {"count": int(r.size), "mean": float(r.mean()) if r.size else None,
           "median": float(np.median(r)) if r.size else None, **_pct(r, (90, 100))}
    timing = {"t_nn": _pct(t_nn), "t_qp": _pct(t_qp), "t_fp": _pct(t_fp),
              "t_serial": _pct(t_s), "t_parallel": _pct(t_p), "t_miqp": _pct(t_miqp)}
    return EvalReport(
        n_samples=n, n_members=n_e,
        member_misclass=wrong.mean(axis=0).tolist(), member_infeasible=infeas.mean(axis=0).tolist(),
        member_any_slack=slack.mean(axis=0).tolist(),
        cumulative_misclass=cum_wrong, cumulative_infeasible=cum_inf,
        infeasible_pre_fp=float(np.mean(pre)), infeasible_post_fp=float(np.mean(post)),
        repaired_by_fp=repaired, suboptimality=sub,
        pcc=pearson(acc.ravel(), (~infeas).ravel()), timing=timing, rows=rows)
