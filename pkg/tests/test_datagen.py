import numpy as np
import pytest

from redsplan.core import ModelParams
from redsplan.datagen import (
    Dataset,
    SampleRanges,
    SamplingError,
    generate_dataset,
    harvest_from_sim,
    read_dataset,
    sample_parameters,
    write_dataset,
)
from redsplan.miqp import MiqpWeights, build_miqp, solve_bnb
from redsplan.simenv import EpisodeConfig, ExpertPlanner, run_episode
from redsplan.softqp import solve_soft_qp

W = MiqpWeights()
M = ModelParams(N=8)


@pytest.fixture(scope="module")
def small():
    return generate_dataset(10, SampleRanges(n_obs=(1, 3)), M, W, seed=5)


class TestSampling:
    def test_collapsed_ranges(self):
        r = SampleRanges(n_lanes=(2, 2), n_obs=(1, 1), obs_s=(40, 40), v_s=(10, 10), v_n=(0, 0))
        a = sample_parameters(np.random.default_rng(0), r, M)
        assert a.n_lanes == 2 and a.n_obs == 1
        assert a.x0.v_s == 10 and a.obstacles[0].v_obs == 10
        s_mid = 0.5 * (a.obstacles[0].bounds[0, 0] + a.obstacles[0].bounds[0, 1])
        assert s_mid == pytest.approx(40.0)

    def test_ranges_respected(self):
        rng = np.random.default_rng(1)
        r = SampleRanges()
        m = ModelParams(N=2)
        mids, counts, lanes = [], [], []
        for _ in range(2000):
            pi = sample_parameters(rng, r, m)
            counts.append(pi.n_obs)
            lanes.append(pi.n_lanes)
            mids += [0.5 * (ob.bounds[0, 0] + ob.bounds[0, 1]) for ob in pi.obstacles]
            lo, hi = m.road_limits(pi.n_lanes)
            assert lo + m.d_bnd <= pi.x0.n <= hi - m.d_bnd
            for ob in pi.obstacles:
                assert not ob.initial.contains(0.0, pi.x0.n)
        assert -120 <= min(mids) and max(mids) <= 200
        assert set(counts) == {1, 2, 3, 4, 5}
        assert set(lanes) == {1, 2, 3}

    def test_invalid_ranges(self):
        with pytest.raises(ValueError):
            SampleRanges(n_obs=(3, 1))

    def test_overlap_budget(self):
        # every obstacle position is on top of the ego
        r = SampleRanges(n_lanes=(1, 1), n_obs=(1, 1), obs_s=(0, 0))
        with pytest.raises(SamplingError):
            sample_parameters(np.random.default_rng(0), r, M)


class TestDataset:
    def test_reproducible_hash(self, small):
        again = generate_dataset(10, SampleRanges(n_obs=(1, 3)), M, W, seed=5)
        assert again.content_hash() == small.content_hash()
        other = generate_dataset(10, SampleRanges(n_obs=(1, 3)), M, W, seed=6)
        assert other.content_hash() != small.content_hash()

    def test_labels_valid_and_feasible(self, small):
        for rec in small:
            rec.labels.validate()
            soft = solve_soft_qp(build_miqp(rec.params, W, M), rec.labels)
            assert soft.max_slack <= 1 + 1e-6

    def test_stored_cost_matches_resolve(self, small):
        for rec in list(small)[:4]:
            sol = solve_bnb(build_miqp(rec.params, W, M))
            assert sol.objective == pytest.approx(rec.J_e, rel=1e-6, abs=1e-6)

    def test_round_trip(self, small, tmp_path):
        man = write_dataset(small, tmp_path / "d.jsonl")
        back = read_dataset(tmp_path / "d.jsonl")
        assert man["count"] == 10 and man["hash"] == small.content_hash()
        assert back.content_hash() == small.content_hash()
        for a, b in zip(small, back):
            assert a.to_json() == b.to_json()
            np.testing.assert_array_equal(a.params.obstacles[0].bounds, b.params.obstacles[0].bounds)

    def test_slicing_and_concat(self, small):
        a, b = small.split(4)
        assert len(a) == 4 and len(b) == 6
        assert (a + b).content_hash() == small.content_hash()

    def test_zero_requested(self):
        with pytest.raises(ValueError):
            generate_dataset(0, SampleRanges(), M)


class TestHarvest:
    def test_empty(self):
        ds = harvest_from_sim([], M, W)
        assert isinstance(ds, Dataset) and len(ds) == 0

    def test_expert_episode_self_consistent(self):
        decisions = []
        expert = ExpertPlanner(W)

        def recording(pi, m):
            out = expert(pi, m)
            decisions.append(out.info.get("binaries"))
            return out

        cfg = EpisodeConfig(duration=2.0, density=0.02, seed=4, ego_lane=1)
        _, log = run_episode(cfg, recording, M, W)
        ds = harvest_from_sim(log.snapshots, M, W)
        assert len(ds) == len(log.snapshots)
        for rec, b in zip(ds, decisions):
            assert rec.labels == b
