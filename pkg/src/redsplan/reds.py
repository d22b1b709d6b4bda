"""Recurrent equivariant deep sets for predicting expert binaries.

Obstacles form a set: every obstacle gets its own hidden state, the encoder
layers mix those states only through sums over the set, and one weight-tied
LSTM decodes each obstacle state into per-step region logits. The
unstructured state (ego, road) is decoded into per-step lane-change logits.
The network therefore accepts any number of obstacles and any horizon, and
permuting the obstacles permutes the region logits and leaves the lane
logits unchanged.

Baselines for ablations: ``eds`` swaps the LSTM decoders for feed-forward
heads of a fixed horizon, ``ff`` and ``lstm`` see a zero-padded flat vector
of at most ``n_obs_max`` obstacles.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .core import PlannerParams
from .miqp import BinaryAssignment

log = logging.getLogger(__name__)

DTYPE = torch.float64
MODEL_FORMAT = "redsplan-model"
MODEL_VERSION = 1
POS_SCALE = 1.0 / 100.0
VEL_SCALE = 1.0 / 30.0
M_EQ = 6
M_US = 6
ARCHS = ("reds", "eds", "ff", "lstm")
# full-scale sizes per architecture
FULL_SIZES = {
    "ff": dict(hidden=128, layers=7),
    "lstm": dict(hidden=128, layers=2, in_layers=2, in_hidden=128, out_layers=2, out_hidden=128),
    "eds": dict(hidden=64, layers=7, in_layers=2, in_hidden=128, out_layers=2, out_hidden=128),
    "reds": dict(hidden=64, layers=7, in_layers=1, out_layers=1),
}


# -- features ------------------------------------------------------------------


@dataclass
class FeatureSplit:
    """Per-obstacle features (J, M_EQ) and unstructured features (M_US,)."""

    zeta_eq: np.ndarray
    zeta_us: np.ndarray

    @property
    def n_obs(self) -> int:
        return self.zeta_eq.shape[0]

    def permuted(self, order) -> "FeatureSplit":
        return FeatureSplit(self.zeta_eq[list(order)], self.zeta_us)


def featurize(pi: PlannerParams, pos_scale: float = POS_SCALE,
              vel_scale: float = VEL_SCALE) -> FeatureSplit:
    """Initial obstacle states and sizes plus ego state, speed target and road.

    Longitudinal obstacle positions are relative to the ego.
    """
    eq = np.zeros((pi.n_obs, M_EQ))
    for j, ob in enumerate(pi.obstacles):
        d = ob.bounds[0]
        eq[j] = [(0.5 * (d[0] + d[1]) - pi.x0.s) * pos_scale, 0.5 * (d[2] + d[3]) * pos_scale,
                 ob.v_obs * vel_scale, 0.0, (d[0] - d[1]) * pos_scale, (d[2] - d[3]) * pos_scale]
    x = pi.x0
    us = np.array([x.n * pos_scale, x.v_s * vel_scale, x.v_n * vel_scale, pi.v_ref * vel_scale,
                   float(pi.n_lanes), pi.lane0_ref * pos_scale])
    return FeatureSplit(eq, us)


@dataclass
class Batch:
    eq: torch.Tensor  # (B, J, M_EQ)
    mask: torch.Tensor  # (B, J) bool
    us: torch.Tensor  # (B, M_US)

    @property
    def size(self) -> int:
        return self.us.shape[0]


def collate(feats: Sequence[FeatureSplit], n_slots: int | None = None) -> Batch:
    B = len(feats)
    J = max((f.n_obs for f in feats), default=0)
    if n_slots is not None:
        if J > n_slots:
            raise ValueError(f"{J} obstacles exceed the {n_slots} input slots of this network")
        J = n_slots
    eq = np.zeros((B, J, M_EQ))
    mask = np.zeros((B, J), bool)
    for b, f in enumerate(feats):
        eq[b, :f.n_obs] = f.zeta_eq
        mask[b, :f.n_obs] = True
    us = np.stack([f.zeta_us for f in feats]) if B else np.zeros((0, M_US))
    return Batch(torch.as_tensor(eq, dtype=DTYPE), torch.as_tensor(mask),
                 torch.as_tensor(us, dtype=DTYPE))


@dataclass
class Targets:
    region: torch.Tensor  # (B, N+1, J) long, -1 where padded
    lane: torch.Tensor  # (B, N) long


def collate_targets(labels: Sequence[BinaryAssignment], n_slots: int) -> Targets:
    B = len(labels)
    N = labels[0].N
    region = np.full((B, N + 1, n_slots), -1, np.int64)
    lane = np.zeros((B, N), np.int64)
    for b, lab in enumerate(labels):
        if lab.N != N:
            raise ValueError("labels in one batch must share the horizon")
        lab.validate()
        region[b, :, :lab.n_obs] = lab.region_classes
        lane[b] = lab.lane_classes
    return Targets(torch.as_tensor(region), torch.as_tensor(lane))


# -- building blocks -------------------------------------------------------------


def lstm_step(x, h, c, W_ih, W_hh, b):
    """One LSTM step with gate order (input, forget, candidate, output)."""
    z = x @ W_ih.T + h @ W_hh.T + b
    i, f, g, o = z.chunk(4, dim=-1)
    i, f, o = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o)
    c_new = f * c + i * torch.tanh(g)
    return o * torch.tanh(c_new), c_new


class LSTMCell(nn.Module):
    def __init__(self, n_in: int, n_hidden: int):
        super().__init__()
        k = 1.0 / math.sqrt(n_hidden)
        self.W_ih = nn.Parameter(torch.empty(4 * n_hidden, n_in, dtype=DTYPE).uniform_(-k, k))
        self.W_hh = nn.Parameter(torch.empty(4 * n_hidden, n_hidden, dtype=DTYPE).uniform_(-k, k))
        self.b = nn.Parameter(torch.empty(4 * n_hidden, dtype=DTYPE).uniform_(-k, k))
        self.n_hidden = n_hidden

    def unroll(self, x: torch.Tensor, steps: int) -> torch.Tensor:
        """Run ``steps`` steps on the constant input ``x`` (..., n_in) from a zero state."""
        h = x.new_zeros(x.shape[:-1] + (self.n_hidden,))
        c = torch.zeros_like(h)
        out = []
        for _ in range(steps):
            h, c = lstm_step(x, h, c, self.W_ih, self.W_hh, self.b)
            out.append(h)
        return torch.stack(out, dim=-2)


def _linear(n_in: int, n_out: int, bias: bool = True) -> nn.Linear:
    return nn.Linear(n_in, n_out, bias=bias, dtype=DTYPE)


def _mlp(n_in: int, hidden: int, n_layers: int, n_out: int | None = None) -> nn.Sequential:
    """``n_layers`` ReLU layers of width ``hidden``, then an optional linear output."""
    mods: list = []
    w = n_in
    for _ in range(n_layers):
        mods += [_linear(w, hidden), nn.ReLU()]
        w = hidden
    if n_out is not None:
        mods.append(_linear(w, n_out))
    return nn.Sequential(*mods)


class EncoderLayer(nn.Module):
    """Equivariant mixing of the set states with the unstructured state."""

    def __init__(self, m_h: int):
        super().__init__()
        self.theta_ee = _linear(m_h, m_h, bias=False)
        self.gamma_ee = _linear(m_h, m_h, bias=False)
        self.theta_eu = _linear(m_h, m_h, bias=False)
        self.theta_ue = _linear(m_h, m_h, bias=False)
        self.theta_uu = _linear(m_h, m_h, bias=False)

    def forward(self, h_eq, mask, h_us):
        m = mask.unsqueeze(-1).to(h_eq.dtype)
        pooled = (h_eq * m).sum(dim=1)  # (B, m_h); zero for an empty set
        f_ee = torch.relu(self.theta_ee(h_eq) + self.gamma_ee(pooled).unsqueeze(1))
        f_ue = torch.relu(self.theta_ue(h_us)).unsqueeze(1)
        f_eu = torch.relu(self.theta_eu(pooled))
        f_uu = torch.relu(self.theta_uu(h_us))
        return (f_ee + f_ue) * m, f_uu + f_eu


@dataclass(frozen=True)
class ArchConfig:
    arch: str = "reds"
    hidden: int = 64
    layers: int = 7
    in_layers: int = 1
    in_hidden: int = 64
    out_layers: int = 1
    out_hidden: int = 64
    # fixed sizes for the architectures that need them
    horizon: int | None = None
    n_obs_max: int = 5

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if self.arch != "reds" and self.horizon is None:
            raise ValueError(f"architecture {self.arch!r} needs a fixed horizon")


@dataclass
class Prediction:
    region_logits: torch.Tensor  # (B, N+1, J, 4)
    lane_logits: torch.Tensor  # (B, N, 3)
    mask: torch.Tensor  # (B, J)


def predict_binaries(region_logits, lane_logits, n_obs: int | None = None) -> BinaryAssignment:
    """Per-group argmax of one sample's logits; ties go to the lowest class index."""
    rl = np.asarray(torch.as_tensor(region_logits).detach(), float)
    ll = np.asarray(torch.as_tensor(lane_logits).detach(), float)
    if n_obs is not None:
        rl = rl[:, :n_obs]
    if not (np.all(np.isfinite(rl)) and np.all(np.isfinite(ll))):
        raise ValueError("logits must be finite")
    region = rl.argmax(axis=-1) if rl.size else np.zeros(rl.shape[:2], int)
    return BinaryAssignment.from_classes(ll.argmax(axis=-1), region)


class RedsNet(nn.Module):
    """REDS (``arch="reds"``) or its non-recurrent variant (``arch="eds"``)."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        m = cfg.hidden
        self.in_eq = _mlp(M_EQ, cfg.in_hidden, cfg.in_layers - 1, m) if cfg.in_layers > 1 \
            else _linear(M_EQ, m)
        self.in_us = _mlp(M_US, cfg.in_hidden, cfg.in_layers - 1, m) if cfg.in_layers > 1 \
            else _linear(M_US, m)
        self.layers = nn.ModuleList(EncoderLayer(m) for _ in range(cfg.layers))
        if cfg.arch == "reds":
            self.dec_eq = LSTMCell(m, m)
            self.dec_us = LSTMCell(m, m)
            self.head_eq = _mlp(m, cfg.out_hidden, cfg.out_layers - 1, 4)
            self.head_us = _mlp(m, cfg.out_hidden, cfg.out_layers - 1, 3)
        else:
            N = cfg.horizon
            self.head_eq = _mlp(m, cfg.out_hidden, cfg.out_layers, (N + 1) * 4)
            self.head_us = _mlp(m, cfg.out_hidden, cfg.out_layers, N * 3)

    def encode(self, batch: Batch):
        h_eq = torch.relu(self.in_eq(batch.eq)) * batch.mask.unsqueeze(-1).to(DTYPE)
        h_us = torch.relu(self.in_us(batch.us))
        for layer in self.layers:
            h_eq, h_us = layer(h_eq, batch.mask, h_us)
        return h_eq, h_us

    def forward(self, batch: Batch, N: int) -> Prediction:
        if N < 1:
            raise ValueError("horizon must be >= 1")
        h_eq, h_us = self.encode(batch)
        B, J, _ = h_eq.shape
        if self.cfg.arch == "reds":
            seq_eq = self.dec_eq.unroll(h_eq, N + 1)  # (B, J, N+1, m)
            region = self.head_eq(seq_eq).permute(0, 2, 1, 3)
            lane = self.head_us(self.dec_us.unroll(h_us, N))
        else:
            if N != self.cfg.horizon:
                raise ValueError(f"this network predicts horizon {self.cfg.horizon}, not {N}")
            region = self.head_eq(h_eq).reshape(B, J, N + 1, 4).permute(0, 2, 1, 3)
            lane = self.head_us(h_us).reshape(B, N, 3)
        return Prediction(region, lane, batch.mask)


class FlatNet(nn.Module):
    """Baselines on a zero-padded flat input of ``n_obs_max`` obstacle slots."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        J, N = cfg.n_obs_max, cfg.horizon
        n_in = J * (M_EQ + 1) + M_US
        if cfg.arch == "ff":
            self.net = _mlp(n_in, cfg.hidden, cfg.layers, (N + 1) * J * 4 + N * 3)
        else:
            self.inp = _mlp(n_in, cfg.in_hidden, cfg.in_layers)
            self.cells = nn.ModuleList(
                LSTMCell(cfg.in_hidden if k == 0 else cfg.hidden, cfg.hidden)
                for k in range(cfg.layers))
            self.out = _mlp(cfg.hidden, cfg.out_hidden, cfg.out_layers, J * 4 + 3)

    def forward(self, batch: Batch, N: int) -> Prediction:
        cfg = self.cfg
        J = cfg.n_obs_max
        if N != cfg.horizon:
            raise ValueError(f"this network predicts horizon {cfg.horizon}, not {N}")
        if batch.eq.shape[1] > J:
            raise ValueError(f"{batch.eq.shape[1]} obstacles exceed the {J} input slots")
        B, Jb = batch.mask.shape
        eq = batch.eq.new_zeros(B, J, M_EQ + 1)
        eq[:, :Jb, :M_EQ] = batch.eq
        eq[:, :Jb, M_EQ] = batch.mask.to(DTYPE)
        x = torch.cat([eq.reshape(B, -1), batch.us], dim=1)
        if cfg.arch == "ff":
            y = self.net(x)
            region = y[:, :(N + 1) * J * 4].reshape(B, N + 1, J, 4)
            lane = y[:, (N + 1) * J * 4:].reshape(B, N, 3)
        else:
            h = self.cells[0].unroll(self.inp(x), N + 1)
            for cell in self.cells[1:]:
                h = self._stack(cell, h)
            y = self.out(h)  # (B, N+1, J*4+3)
            region = y[..., :J * 4].reshape(B, N + 1, J, 4)
            lane = y[:, :N, J * 4:]
        return Prediction(region[:, :, :Jb], lane, batch.mask)

    @staticmethod
    def _stack(cell: LSTMCell, seq: torch.Tensor) -> torch.Tensor:
        h = seq.new_zeros(seq.shape[0], cell.n_hidden)
        c = torch.zeros_like(h)
        out = []
        for t in range(seq.shape[1]):
            h, c = lstm_step(seq[:, t], h, c, cell.W_ih, cell.W_hh, cell.b)
            out.append(h)
        return torch.stack(out, dim=1)


def build_network(cfg: ArchConfig, seed: int = 0) -> nn.Module:
    """Fresh network with parameters drawn from a generator seeded by ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return RedsNet(cfg) if cfg.arch in ("reds", "eds") else FlatNet(cfg)


def n_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


# -- loss and training ---------------------------------------------------------


def cross_entropy(pred: Prediction, tgt: Targets) -> torch.Tensor:
    """Mean cross-entropy over every region and lane-change group in the batch."""
    rl = pred.region_logits.reshape(-1, 4)
    rt = tgt.region[:, :, :pred.region_logits.shape[2]].reshape(-1)
    ll = pred.lane_logits.reshape(-1, 3)
    lt = tgt.lane.reshape(-1)
    f = nn.functional
    total = f.cross_entropy(ll, lt, reduction="sum")
    count = lt.numel()
    valid = rt >= 0
    if valid.any():
        total = total + f.cross_entropy(rl[valid], rt[valid], reduction="sum")
        count += int(valid.sum())
    return total / count


def loss_and_grads(net: nn.Module, feats: Sequence[FeatureSplit],
                   labels: Sequence[BinaryAssignment]) -> tuple[float, list]:
    """Loss and its gradient for every parameter (in ``net.parameters()`` order)."""
    slots = net.cfg.n_obs_max if isinstance(net, FlatNet) else None
    batch = collate(feats, slots)
    tgt = collate_targets(labels, batch.eq.shape[1])
    net.zero_grad()
    loss = cross_entropy(net(batch, labels[0].N), tgt)
    loss.backward()
    return float(loss.detach()), [p.grad.detach().clone() for p in net.parameters()]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 128
    epochs: int = 1500
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


PRESETS = {
    "table": TrainConfig(),
    "text": TrainConfig(lr=1e-4, batch_size=1024),
    "desk": TrainConfig(lr=2e-3, batch_size=64, epochs=300),
}


class TrainingDiverged(RuntimeError):
    pass


def train(net: nn.Module, feats: Sequence[FeatureSplit], labels: Sequence[BinaryAssignment],
          hyper: TrainConfig, seed: int = 0, log_every: int = 0) -> list[float]:
    """Adam with decoupled weight decay; returns the mean training loss per epoch.

    Samples are grouped by horizon so every minibatch has one horizon.
    """
    if not len(feats):
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    opt = torch.optim.AdamW(net.parameters(), lr=hyper.lr, betas=hyper.betas, eps=hyper.eps,
                            weight_decay=hyper.weight_decay)
    slots = net.cfg.n_obs_max if isinstance(net, FlatNet) else None
    by_N: dict = {}
    for i, lab in enumerate(labels):
        by_N.setdefault(lab.N, []).append(i)
    # pre-collate in chunks; minibatches index into them
    groups = []
    for N, idx in sorted(by_N.items()):
        idx = np.asarray(idx)
        b = collate([feats[i] for i in idx], slots)
        t = collate_targets([labels[i] for i in idx], b.eq.shape[1])
        groups.append((N, b, t))
    history = []
    net.train()
    for ep in range(hyper.epochs):
        tot, cnt = 0.0, 0
        order = [(g, chunk) for g, (_, b, _) in enumerate(groups)
                 for chunk in np.array_split(rng.permutation(b.size),
                                             max(1, math.ceil(b.size / hyper.batch_size)))]
        for k in rng.permutation(len(order)):
            g, chunk = order[k]
            N, b, t = groups[g]
            ci = torch.as_tensor(chunk)
            mb = Batch(b.eq[ci], b.mask[ci], b.us[ci])
            mt = Targets(t.region[ci], t.lane[ci])
            opt.zero_grad()
            loss = cross_entropy(net(mb, N), mt)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"loss became {float(loss)} in epoch {ep}")
            loss.backward()
            opt.step()
            tot += float(loss.detach()) * len(chunk)
            cnt += len(chunk)
        history.append(tot / cnt)
        if log_every and (ep + 1) % log_every == 0:
            log.info("epoch %d loss %.5f", ep + 1, history[-1])
    net.eval()
    return history


@torch.no_grad()
def predict_logits(net: nn.Module, feats: Sequence[FeatureSplit], N: int,
                   chunk: int = 512) -> list[tuple[np.ndarray, np.ndarray]]:
    slots = net.cfg.n_obs_max if isinstance(net, FlatNet) else None
    out = []
    for k in range(0, len(feats), chunk):
        part = feats[k:k + chunk]
        pred = net(collate(part, slots), N)
        rl = pred.region_logits.numpy()
        ll = pred.lane_logits.numpy()
        for b, f in enumerate(part):
            out.append((rl[b, :, :f.n_obs], ll[b]))
    return out


# -- model files -----------------------------------------------------------------


def save_model(path: str | Path, net: nn.Module, seed: int, extra: dict | None = None) -> None:
    """Write a versioned ``.npz`` holding the metadata header and every tensor."""
    meta = {"format": MODEL_FORMAT, "version": MODEL_VERSION, "arch": asdict(net.cfg),
            "seed": seed, "pos_scale": POS_SCALE, "vel_scale": VEL_SCALE, **(extra or {})}
    arrays = {k: v.detach().numpy() for k, v in net.state_dict().items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), np.uint8), **arrays)


def load_model(path: str | Path) -> tuple[nn.Module, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != MODEL_FORMAT:
            raise ValueError(f"{path} is not a model file")
        if meta["version"] > MODEL_VERSION:
            raise ValueError(f"model version {meta['version']} is newer than supported")
        cfg = ArchConfig(**meta["arch"])
        net = build_network(cfg, meta["seed"])
        state = {k: torch.as_tensor(z[k]) for k in z.files if k != "__meta__"}
    net.load_state_dict(state)
    net.eval()
    return net, meta


# -- estimator -------------------------------------------------------------------


class RedsClassifier:
    """Scikit-learn style estimator mapping planning problems to binary assignments.

    ``fit`` takes a list of :class:`PlannerParams` and a list of
    :class:`BinaryAssignment`; ``predict`` returns assignments for the
    horizon given (default: the training horizon).
    """

    def __init__(self, arch: str = "reds", hidden: int = 64, layers: int = 7, in_layers: int = 1,
                 in_hidden: int = 64, out_layers: int = 1, out_hidden: int = 64,
                 n_obs_max: int = 5, lr: float = 5e-5, batch_size: int = 128, epochs: int = 1500,
                 weight_decay: float = 1e-5, seed: int = 0):
        self.arch = arch
        self.hidden = hidden
        self.layers = layers
        self.in_layers = in_layers
        self.in_hidden = in_hidden
        self.out_layers = out_layers
        self.out_hidden = out_hidden
        self.n_obs_max = n_obs_max
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.seed = seed

    _PARAMS = ("arch", "hidden", "layers", "in_layers", "in_hidden", "out_layers", "out_hidden",
               "n_obs_max", "lr", "batch_size", "epochs", "weight_decay", "seed")

    def get_params(self, deep: bool = True) -> dict:
        return {k: getattr(self, k) for k in self._PARAMS}

    def set_params(self, **kw) -> "RedsClassifier":
        for k, v in kw.items():
            if k not in self._PARAMS:
                raise ValueError(f"unknown parameter {k!r}")
            setattr(self, k, v)
        return self

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={getattr(self, k)!r}" for k in self._PARAMS)
        return f"RedsClassifier({args})"

    def _config(self, horizon: int) -> ArchConfig:
        return ArchConfig(self.arch, self.hidden, self.layers, self.in_layers, self.in_hidden,
                          self.out_layers, self.out_hidden,
                          None if self.arch == "reds" else horizon, self.n_obs_max)

    def init(self, horizon: int) -> "RedsClassifier":
        """Untrained network with this estimator's seed."""
        self.net_ = build_network(self._config(horizon), self.seed)
        self.horizon_ = horizon
        self.loss_history_ = []
        return self

    def fit(self, X: Sequence[PlannerParams], y: Sequence[BinaryAssignment]) -> "RedsClassifier":
        if len(X) != len(y) or not len(X):
            raise ValueError("X and y must be non-empty and of equal length")
        self.init(y[0].N)
        t0 = time.perf_counter()
        hyper = TrainConfig(self.lr, self.batch_size, self.epochs, self.weight_decay)
        self.loss_history_ = train(self.net_, [featurize(p) for p in X], list(y), hyper, self.seed)
        self.train_time_ = time.perf_counter() - t0
        return self

    def _check(self):
        if not hasattr(self, "net_"):
            raise RuntimeError("estimator is not fitted; call fit() or init() first")

    def predict_logits(self, X: Sequence[PlannerParams], N: int | None = None):
        self._check()
        N = N or self.horizon_
        return predict_logits(self.net_, [featurize(p) for p in X], N)

    def predict(self, X: Sequence[PlannerParams], N: int | None = None) -> list[BinaryAssignment]:
        return [predict_binaries(rl, ll) for rl, ll in self.predict_logits(X, N)]

    def predict_one(self, pi: PlannerParams, N: int | None = None) -> BinaryAssignment:
        return self.predict([pi], N)[0]

    def score(self, X: Sequence[PlannerParams], y: Sequence[BinaryAssignment]) -> float:
        """Fraction of correctly classified groups (per step and obstacle, per step lane)."""
        preds = self.predict(X, y[0].N if len(y) else None)
        return group_accuracy(preds, y)

    def save(self, path: str | Path) -> None:
        self._check()
        save_model(path, self.net_, self.seed, {"estimator": self.get_params(),
                                                "horizon": self.horizon_,
                                                "loss_history": self.loss_history_})

    @classmethod
    def load(cls, path: str | Path) -> "RedsClassifier":
        net, meta = load_model(path)
        est = cls(**meta["estimator"])
        est.net_ = net
        est.horizon_ = meta["horizon"]
        est.loss_history_ = meta.get("loss_history", [])
        return est


def group_accuracy(preds: Sequence[BinaryAssignment], labels: Sequence[BinaryAssignment]) -> float:
    hit = tot = 0
    for p, t in zip(preds, labels):
        hit += int(np.sum(p.region_classes == t.region_classes))
        hit += int(np.sum(p.lane_classes == t.lane_classes))
        tot += t.region_classes.size + t.lane_classes.size
    return hit / tot if tot else 1.0


def sample_accuracy(p: BinaryAssignment, t: BinaryAssignment) -> float:
    """Share of correct groups in one sample."""
    n = t.region_classes.size + t.lane_classes.size
    return (int(np.sum(p.region_classes == t.region_classes))
            + int(np.sum(p.lane_classes == t.lane_classes))) / n
