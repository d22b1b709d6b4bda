"""Fast built-in checks run by ``redsplan selftest``.

Each check compares a component against an independent computation on a
few small random cases and returns quickly.
"""

from __future__ import annotations

import itertools
import math
import time

import numpy as np


def _qp_backends(rng) -> str:
    import scipy.sparse as sp

    from .qp import QpProblem, kkt_residuals, solve

    worst = 0.0
    for _ in range(5):
        n = 6
        L = rng.normal(size=(n, n))
        p = QpProblem(sp.csr_matrix(L @ L.T + 0.1 * np.eye(n)), rng.normal(size=n),
                      A_in=sp.csr_matrix(rng.normal(size=(4, n))), ub_in=np.ones(4),
                      lb=-np.ones(n), ub=np.ones(n))
        a, b = solve(p, "ipm"), solve(p, "clarabel")
        if not (a.ok and b.ok):
            raise AssertionError("a solver failed on a feasible QP")
        worst = max(worst, abs(a.objective - b.objective), max(kkt_residuals(p, a)))
    if worst > 1e-6:
        raise AssertionError(f"backends disagree by {worst:.2e}")
    return f"max deviation {worst:.1e}"


def _tiny_instance(rng):
    from .core import EgoState, ModelParams, PlannerParams, obstacle_track

    m = ModelParams(N=1, t_d=1.0)
    ob = obstacle_track(float(rng.uniform(-10, 30)), float(rng.choice([0.0, 3.5])),
                        float(rng.uniform(5, 20)), m)
    lane = float(rng.choice([0.0, 3.5]))
    pi = PlannerParams(EgoState(0.0, lane, float(rng.uniform(5, 20)), 0.0), 15.0, 2, (ob,), lane)
    return pi, m


def _miqp_enumeration(rng) -> str:
    from .miqp import BinaryAssignment, BnbOptions, MiqpWeights, build_miqp, solve_bnb, solve_fixed

    w = MiqpWeights()
    checked = 0
    while checked < 3:
        pi, m = _tiny_instance(rng)
        inst = build_miqp(pi, w, m)
        best = math.inf
        for lane in itertools.product(range(3), repeat=m.N):
            for reg in itertools.product(range(4), repeat=m.N + 1):
                b = BinaryAssignment.from_classes(np.array(lane), np.array(reg).reshape(-1, 1))
                s = solve_fixed(inst, b, backend="clarabel")
                if s.ok:
                    best = min(best, s.objective + inst.const)
        sol = solve_bnb(inst, BnbOptions())
        if not math.isfinite(best):
            if sol.ok:
                raise AssertionError("branch and bound found a solution on an infeasible instance")
            continue
        if abs(sol.objective - best) > 1e-6 * max(1.0, abs(best)):
            raise AssertionError(f"branch and bound {sol.objective} vs enumeration {best}")
        checked += 1
    return f"{checked} instances"


def _equivariance(rng) -> str:
    import torch

    from .core import EgoState, ModelParams, PlannerParams, obstacle_track
    from .reds import ArchConfig, build_network, collate, featurize

    m = ModelParams(N=4)
    net = build_network(ArchConfig("reds", 8, 2, 1, 8, 1, 8), int(rng.integers(1 << 30)))
    obs = tuple(obstacle_track(float(rng.uniform(-50, 100)), float(rng.uniform(0, 7)),
                               float(rng.uniform(0, 30)), m) for _ in range(3))
    pi = PlannerParams(EgoState(0.0, 0.0, 10.0, 0.0), 15.0, 3, obs, 0.0)
    f = featurize(pi)
    with torch.no_grad():
        base = net(collate([f]), 4)
        worst = 0.0
        for order in itertools.permutations(range(3)):
            p = net(collate([f.permuted(order)]), 4)
            worst = max(worst,
                        float((p.region_logits[0] - base.region_logits[0][:, list(order)]).abs().max()),
                        float((p.lane_logits - base.lane_logits).abs().max()))
    if worst > 1e-10:
        raise AssertionError(f"permutation changes outputs by {worst:.2e}")
    return f"max deviation {worst:.1e}"


def _gradients(rng) -> str:
    import torch

    from .core import EgoState, ModelParams, PlannerParams, obstacle_track
    from .miqp import BinaryAssignment
    from .reds import ArchConfig, build_network, featurize, loss_and_grads

    m = ModelParams(N=3)
    net = build_network(ArchConfig("reds", 4, 1, 1, 4, 1, 4), int(rng.integers(1 << 30)))
    ob = obstacle_track(20.0, 3.5, 10.0, m)
    pi = PlannerParams(EgoState(0.0, 0.0, 12.0, 0.0), 15.0, 2, (ob,), 0.0)
    lab = BinaryAssignment.from_classes(rng.integers(0, 3, 3), rng.integers(0, 4, (4, 1)))
    feats = [featurize(pi)]
    _, grads = loss_and_grads(net, feats, [lab])
    params = list(net.parameters())
    worst = 0.0
    h = 1e-6
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        for k in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            old = float(flat[k])
            vals = []
            for x in (old + h, old - h, old):
                with torch.no_grad():
                    flat[k] = x
                vals.append(loss_and_grads(net, feats, [lab])[0])
            fd = (vals[0] - vals[1]) / (2 * h)
            an = float(g.view(-1)[k])
            worst = max(worst, abs(fd - an) / max(1e-6, abs(fd) + abs(an)))
    if worst > 1e-4:
        raise AssertionError(f"gradient relative error {worst:.2e}")
    return f"max relative error {worst:.1e}"


def _krauss(rng) -> str:
    from .simenv import krauss_step

    v = krauss_step(30.0, 20.0, 10.0, 1.0, a_max=100.0, b=5.0, tau=0.2, v_max=100.0)
    want = -1.0 + math.sqrt(301.0)
    if abs(v - want) > 1e-12:
        raise AssertionError(f"safe speed {v} instead of {want}")
    return "closed form matched"


def _relaxation(rng) -> str:
    from .core import ModelParams
    from .datagen import SampleRanges, sample_parameters
    from .miqp import BnbOptions, MiqpWeights, build_miqp, extract_labels, solve_bnb
    from .softqp import solve_soft_qp

    m = ModelParams(N=10)
    w = MiqpWeights()
    done = 0
    while done < 3:
        inst = build_miqp(sample_parameters(rng, SampleRanges(n_obs=(1, 2)), m), w, m)
        sol = solve_bnb(inst, BnbOptions())
        if sol.status != "optimal":
            continue
        sq = solve_soft_qp(inst, extract_labels(sol))
        if not (sq.objective <= sol.objective + 1e-6 and sq.max_slack <= 1 + 1e-6):
            raise AssertionError(f"soft-QP {sq.objective} (slack {sq.max_slack}) vs expert "
                                 f"{sol.objective}")
        done += 1
    return f"{done} instances"


CHECKS = [("qp_backends", _qp_backends), ("miqp_enumeration", _miqp_enumeration),
          ("equivariance", _equivariance), ("gradients", _gradients), ("krauss", _krauss),
          ("relaxation", _relaxation)]


def run_checks(seed: int = 0) -> list[dict]:
    out = []
    for k, (name, fn) in enumerate(CHECKS):
        rng = np.random.default_rng([seed, k])
        t0 = time.perf_counter()
        try:
            msg, ok = fn(rng), True
        except AssertionError as e:
            msg, ok = str(e), False
        out.append({"name": name, "passed": ok, "detail": msg,
                    "seconds": time.perf_counter() - t0})
    return out
