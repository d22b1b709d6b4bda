import math

import numpy as np
import pytest
import torch

from redsplan.core import EgoState, ModelParams, PlannerParams, obstacle_track
from redsplan.miqp import BinaryAssignment
from redsplan.reds import (
    M_EQ,
    M_US,
    FULL_SIZES,
    ArchConfig,
    EncoderLayer,
    FeatureSplit,
    Prediction,
    RedsClassifier,
    build_network,
    collate,
    collate_targets,
    cross_entropy,
    featurize,
    group_accuracy,
    loss_and_grads,
    lstm_step,
    n_parameters,
    predict_binaries,
)

SMALL = dict(hidden=8, layers=2, in_hidden=8, out_hidden=8)


def rand_feats(rng, n_obs):
    return FeatureSplit(rng.normal(size=(n_obs, M_EQ)), rng.normal(size=M_US))


def rand_labels(rng, N, n_obs):
    return BinaryAssignment.from_classes(rng.integers(0, 3, N), rng.integers(0, 4, (N + 1, n_obs)))


def scalar_lstm(x, h, c, W_ih, W_hh, b):
    """Element-by-element LSTM step in plain floats."""
    n = len(h)
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    pre = [b[r] + sum(W_ih[r][k] * x[k] for k in range(len(x))) + sum(W_hh[r][k] * h[k] for k in range(n))
           for r in range(4 * n)]
    h_new, c_new = [], []
    for k in range(n):
        i, f, g, o = sig(pre[k]), sig(pre[n + k]), math.tanh(pre[2 * n + k]), sig(pre[3 * n + k])
        c_new.append(f * c[k] + i * g)
        h_new.append(o * math.tanh(c_new[-1]))
    return h_new, c_new


class TestLstmStep:
    def test_zero(self):
        z = torch.zeros(3, dtype=torch.float64)
        h, c = lstm_step(z, z, z, torch.zeros(12, 3, dtype=torch.float64),
                         torch.zeros(12, 3, dtype=torch.float64), torch.zeros(12, dtype=torch.float64))
        assert not h.any() and not c.any()

    def test_forget_gate_identity(self):
        n = 2
        b = torch.zeros(4 * n, dtype=torch.float64)
        b[:n] = -1e3  # input gate closed
        b[n:2 * n] = 1e3  # forget gate open
        c = torch.tensor([0.3, -1.2], dtype=torch.float64)
        x = torch.randn(3, dtype=torch.float64)
        h0 = torch.randn(n, dtype=torch.float64)
        W_ih = torch.randn(4 * n, 3, dtype=torch.float64) * 0.1
        W_hh = torch.randn(4 * n, n, dtype=torch.float64) * 0.1
        _, c_new = lstm_step(x, h0, c, W_ih, W_hh, b)
        torch.testing.assert_close(c_new, c, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scalar_reference(self, seed):
        g = torch.Generator().manual_seed(seed)
        n_in, n = 3, 4
        args = [torch.randn(s, generator=g, dtype=torch.float64) for s in
                [(n_in,), (n,), (n,), (4 * n, n_in), (4 * n, n), (4 * n,)]]
        h, c = lstm_step(*args)
        h_ref, c_ref = scalar_lstm(*[a.tolist() for a in args])
        np.testing.assert_allclose(h.numpy(), h_ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(c.numpy(), c_ref, rtol=0, atol=1e-12)


class TestEncoderLayer:
    def setup_method(self):
        torch.manual_seed(0)
        self.layer = EncoderLayer(5).double()
        self.h_us = torch.randn(1, 5, dtype=torch.float64)

    def test_single_element(self):
        h = torch.randn(1, 1, 5, dtype=torch.float64)
        L = self.layer
        out, _ = L(h, torch.ones(1, 1, dtype=torch.bool), self.h_us)
        W = L.theta_ee.weight + L.gamma_ee.weight
        want = torch.relu(h @ W.T) + torch.relu(L.theta_ue(self.h_us)).unsqueeze(1)
        torch.testing.assert_close(out, want)

    def test_identical_rows(self):
        row = torch.randn(5, dtype=torch.float64)
        h = torch.stack([row, row, torch.randn(5, dtype=torch.float64)]).unsqueeze(0)
        out, _ = self.layer(h, torch.ones(1, 3, dtype=torch.bool), self.h_us)
        torch.testing.assert_close(out[0, 0], out[0, 1], rtol=0, atol=0)

    def test_swap(self):
        h = torch.randn(1, 3, 5, dtype=torch.float64)
        mask = torch.ones(1, 3, dtype=torch.bool)
        a_eq, a_us = self.layer(h, mask, self.h_us)
        b_eq, b_us = self.layer(h[:, [1, 0, 2]], mask, self.h_us)
        torch.testing.assert_close(b_eq, a_eq[:, [1, 0, 2]], rtol=0, atol=1e-14)
        torch.testing.assert_close(b_us, a_us, rtol=0, atol=1e-14)

    def test_empty_set(self):
        _, us = self.layer(torch.zeros(1, 0, 5, dtype=torch.float64), torch.zeros(1, 0, dtype=torch.bool),
                           self.h_us)
        torch.testing.assert_close(us, torch.relu(self.layer.theta_uu(self.h_us)))


class TestEquivariance:
    @pytest.mark.parametrize("arch", ["reds", "eds"])
    @pytest.mark.parametrize("seed", range(4))
    def test_permutation(self, arch, seed):
        rng = np.random.default_rng(seed)
        net = build_network(ArchConfig(arch, horizon=None if arch == "reds" else 6, **SMALL), seed)
        f = rand_feats(rng, 5)
        order = rng.permutation(5)
        with torch.no_grad():
            a = net(collate([f]), 6)
            b = net(collate([f.permuted(order)]), 6)
        torch.testing.assert_close(b.region_logits, a.region_logits[:, :, order], rtol=0, atol=1e-10)
        torch.testing.assert_close(b.lane_logits, a.lane_logits, rtol=0, atol=1e-10)

    def test_ff_is_not_equivariant(self):
        rng = np.random.default_rng(0)
        net = build_network(ArchConfig("ff", horizon=6, **SMALL), 0)
        f = rand_feats(rng, 3)
        with torch.no_grad():
            a = net(collate([f], 5), 6)
            b = net(collate([f.permuted([1, 0, 2])], 5), 6)
        assert not torch.allclose(b.region_logits[:, :, :3], a.region_logits[:, :, [1, 0, 2]], atol=1e-6)

    def test_variable_sizes(self):
        net = build_network(ArchConfig("reds", **SMALL), 1)
        rng = np.random.default_rng(1)
        with torch.no_grad():
            for J in (0, 1, 8):
                for N in (4, 12, 50):
                    p = net(collate([rand_feats(rng, J)]), N)
                    assert p.region_logits.shape == (1, N + 1, J, 4)
                    assert p.lane_logits.shape == (1, N, 3)

    def test_padding_does_not_leak(self):
        net = build_network(ArchConfig("reds", **SMALL), 2)
        rng = np.random.default_rng(2)
        f1, f3 = rand_feats(rng, 1), rand_feats(rng, 3)
        with torch.no_grad():
            alone = net(collate([f1]), 5)
            padded = net(collate([f1, f3]), 5)
        torch.testing.assert_close(padded.region_logits[:1, :, :1], alone.region_logits, atol=1e-12, rtol=0)
        torch.testing.assert_close(padded.lane_logits[:1], alone.lane_logits, atol=1e-12, rtol=0)

    def test_flat_nets_reject_too_many_obstacles(self):
        net = build_network(ArchConfig("lstm", horizon=4, n_obs_max=2, **SMALL), 0)
        with pytest.raises(ValueError):
            net(collate([rand_feats(np.random.default_rng(0), 3)]), 4)


class TestLoss:
    def test_uniform_logits(self):
        B, N, J = 2, 3, 2
        pred = Prediction(torch.zeros(B, N + 1, J, 4), torch.zeros(B, N, 3), torch.ones(B, J, dtype=torch.bool))
        rng = np.random.default_rng(0)
        labs = [BinaryAssignment.from_classes(np.zeros(N, int), rng.integers(0, 4, (N + 1, J)))
                for _ in range(B)]
        tgt = collate_targets(labs, J)
        n4, n3 = B * (N + 1) * J, B * N
        want = (n4 * math.log(4) + n3 * math.log(3)) / (n4 + n3)
        assert float(cross_entropy(pred, tgt)) == pytest.approx(want)

    def test_confident_logits(self):
        lab = BinaryAssignment.from_classes(np.array([2, 0]), np.array([[1], [3], [0]]))
        rl = torch.full((1, 3, 1, 4), -1e3)
        ll = torch.full((1, 2, 3), -1e3)
        for i, k in enumerate(lab.region_classes[:, 0]):
            rl[0, i, 0, k] = 1e3
        for i, k in enumerate(lab.lane_classes):
            ll[0, i, k] = 1e3
        loss = cross_entropy(Prediction(rl, ll, torch.ones(1, 1, dtype=torch.bool)), collate_targets([lab], 1))
        assert float(loss) < 1e-12

    def test_invalid_labels(self):
        bad = BinaryAssignment(np.array([[1, 1]]), np.zeros((2, 0, 4)))
        with pytest.raises(ValueError):
            collate_targets([bad], 0)

    @pytest.mark.parametrize("arch", ["reds", "eds", "ff", "lstm"])
    def test_gradients_finite_differences(self, arch):
        rng = np.random.default_rng(3)
        N = 3
        net = build_network(ArchConfig(arch, horizon=None if arch == "reds" else N, n_obs_max=3, **SMALL), 3)
        feats = [rand_feats(rng, j) for j in (1, 2, 3)]
        labs = [rand_labels(rng, N, f.n_obs) for f in feats]
        _, grads = loss_and_grads(net, feats, labs)
        params = list(net.parameters())
        h = 1e-6
        for _ in range(12):
            k = int(rng.integers(len(params)))
            idx = tuple(int(rng.integers(s)) for s in params[k].shape)
            p = params[k]
            with torch.no_grad():
                old = p[idx].item()
                p[idx] = old + h
                up = float(cross_entropy(net(collate(feats, net.cfg.n_obs_max if arch in ("ff", "lstm") else None), N),
                                         collate_targets(labs, 3)))
                p[idx] = old - h
                dn = float(cross_entropy(net(collate(feats, net.cfg.n_obs_max if arch in ("ff", "lstm") else None), N),
                                         collate_targets(labs, 3)))
                p[idx] = old
            fd = (up - dn) / (2 * h)
            g = grads[k][idx].item()
            assert abs(g - fd) <= 1e-4 * max(abs(fd), abs(g)) + 1e-8


class TestPredictBinaries:
    def test_region_argmax(self):
        b = predict_binaries(np.array([[[2.0, 1, 0, -1]]]), np.zeros((0, 3)))
        np.testing.assert_array_equal(b.Gamma[0, 0], [1, 0, 0, 0])

    def test_lane_none(self):
        b = predict_binaries(np.zeros((4, 0, 4)), np.tile([0.0, 0.0, 5.0], (3, 1)))
        assert not b.Lambda.any()

    def test_tie_goes_low(self):
        b = predict_binaries(np.array([[[1.0, 1.0, 0, 0]], [[0.0, 0, 0, 0]]]), np.array([[3.0, 3.0, 0.0]]))
        assert b.region_classes[0, 0] == 0 and b.lane_classes[0] == 0

    def test_non_finite(self):
        with pytest.raises(ValueError):
            predict_binaries(np.array([[[np.nan, 0, 0, 0]]]), np.zeros((0, 3)))


class TestTraining:
    def _one(self):
        m = ModelParams(N=6)
        pi = PlannerParams(EgoState(0, 0, 12, 0), 15, 2, (obstacle_track(30, 0, 5, m),), 0.0)
        lab = BinaryAssignment.from_classes(np.array([2, 0, 2, 2, 2, 1]), np.array([[1], [1], [2], [2], [0], [0], [0]]))
        return pi, lab

    def test_memorize_single_sample(self):
        pi, lab = self._one()
        est = RedsClassifier(lr=1e-2, batch_size=1, epochs=500, weight_decay=0.0, seed=0, hidden=16, layers=2,
                             in_hidden=16, out_hidden=16).fit([pi], [lab])
        assert est.loss_history_[-1] < 0.01
        assert est.predict_one(pi) == lab

    def test_deterministic(self):
        pi, lab = self._one()
        a = RedsClassifier(lr=1e-2, epochs=20, seed=4, **SMALL).fit([pi] * 3, [lab] * 3)
        b = RedsClassifier(lr=1e-2, epochs=20, seed=4, **SMALL).fit([pi] * 3, [lab] * 3)
        for p, q in zip(a.net_.parameters(), b.net_.parameters()):
            assert torch.equal(p, q)

    def test_save_load(self, tmp_path):
        pi, lab = self._one()
        est = RedsClassifier(lr=1e-2, epochs=5, seed=1, **SMALL).fit([pi], [lab])
        est.save(tmp_path / "m.npz")
        back = RedsClassifier.load(tmp_path / "m.npz")
        assert back.get_params() == est.get_params()
        np.testing.assert_array_equal(back.predict_logits([pi])[0][0], est.predict_logits([pi])[0][0])

    def test_unfitted(self):
        with pytest.raises(RuntimeError):
            RedsClassifier().predict([])

    def test_set_params(self):
        est = RedsClassifier().set_params(hidden=16)
        assert est.hidden == 16
        with pytest.raises(ValueError):
            est.set_params(bogus=1)

    def test_score_is_group_accuracy(self):
        pi, lab = self._one()
        est = RedsClassifier(seed=0, **SMALL).init(6)
        assert est.score([pi], [lab]) == group_accuracy(est.predict([pi]), [lab])


class TestSizes:
    def test_full_sizes_are_of_order_1e5(self):
        for arch, kw in FULL_SIZES.items():
            n = n_parameters(build_network(ArchConfig(arch, horizon=28, n_obs_max=5, **kw), 0))
            assert 1e5 <= n < 1e6, (arch, n)

    def test_recurrent_decoder_adds_parameters(self):
        kw = FULL_SIZES["reds"]
        reds = n_parameters(build_network(ArchConfig("reds", **kw), 0))
        eds = n_parameters(build_network(ArchConfig("eds", horizon=28, **kw), 0))
        assert reds > eds


def test_featurize_relative_positions():
    m = ModelParams(N=4)
    pi = PlannerParams(EgoState(100.0, 0.0, 10.0, 0.0), 15, 2, (obstacle_track(130.0, 3.5, 8.0, m),), 0.0)
    f = featurize(pi)
    assert f.zeta_eq.shape == (1, M_EQ) and f.zeta_us.shape == (M_US,)
    assert f.zeta_eq[0, 0] == pytest.approx(0.3)
    assert f.zeta_eq[0, 2] == pytest.approx(8.0 / 30.0)
