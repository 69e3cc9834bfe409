"""Attention CNN survival model trained with a Cox partial-likelihood loss.

The network maps an RGB patch to a 32-dimensional feature vector and a scalar
risk. Three conv stages carry channel+spatial attention blocks; the flattened
features pass through a sigmoid-gated feature attention before the final
fully connected layer. The risk head is a bias-free linear map so that risks
are identified only up to the translation the partial likelihood ignores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, UntrainableClusterError


@dataclass
class NetConfig:
    """Architecture and optimization settings for one cluster model.

    input_side must be a multiple of 64 (the stride/pool chain divides the
    side by 64 overall). Full-scale runs use input_side=512, batch_size=256,
    lr0=0.1, epochs=150; the desk profile shrinks these.
    """

    input_side: int = 64
    channels: int = 32
    cbam_reduce: int = 4
    nam_reduce: int = 32
    feature_dim: int = 32
    epochs: int = 30
    batch_size: int = 32
    lr0: float = 0.01
    lr_half_every: int = 20
    bn_momentum: float = 0.9

    def validate(self) -> None:
        if self.input_side < 64 or self.input_side % 64 != 0:
            raise ConfigError(f"input_side must be a positive multiple of 64, got {self.input_side}")
        if self.channels % self.cbam_reduce != 0:
            raise ConfigError("channels must be divisible by cbam_reduce")
        if self.flatten_dim % self.nam_reduce != 0:
            raise ConfigError("flattened length must be divisible by nam_reduce")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")
        if self.lr0 <= 0 or self.lr_half_every < 1:
            raise ConfigError("lr0 must be positive and lr_half_every >= 1")

    @property
    def flatten_dim(self) -> int:
        s = -(-self.input_side // 4)  # conv stride 4, same padding
        s //= 2                       # maxpool
        s = -(-s // 2)                # conv stride 2
        s = -(-s // 2)                # conv stride 2
        s //= 2                       # maxpool
        return self.channels * s * s


def lr_at(epoch: int, lr0: float, half_every: int) -> float:
    """Step schedule: the rate halves every ``half_every`` epochs."""
    return lr0 * 0.5 ** (epoch // half_every)


class _Conv:
    def __init__(self, c_in: int, c_out: int, k: int, stride: int, rng: np.random.Generator):
        fan_in = c_in * k * k
        self.w = Tensor(ad.kaiming_uniform((c_out, c_in, k, k), fan_in, rng), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding="same")

    def params(self):
        return [("w", self.w), ("b", self.b)]


class _Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.w = Tensor(ad.kaiming_uniform((d_in, d_out), d_in, rng), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.w)
        return ad.add(out, self.b) if self.b is not None else out

    def params(self):
        return [("w", self.w)] + ([("b", self.b)] if self.b is not None else [])


class _BatchNorm:
    def __init__(self, channels: int, momentum: float):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ad.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, training, momentum=self.momentum)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class ChannelAttention:
    """Per-channel gate: sigmoid(MLP(avgpool) + MLP(maxpool)), shared MLP."""

    def __init__(self, channels: int, reduce: int, rng: np.random.Generator):
        self.fc1 = _Linear(channels, channels // reduce, rng)
        self.fc2 = _Linear(channels // reduce, channels, rng)
        self.channels = channels

    def _mlp(self, pooled: Tensor) -> Tensor:
        n = pooled.data.shape[0]
        flat = ad.reshape(pooled, (n, self.channels))
        return self.fc2(ad.relu(self.fc1(flat)))

    def __call__(self, x: Tensor) -> Tensor:
        n = x.data.shape[0]
        gate = ad.sigmoid(ad.add(self._mlp(ad.global_avg_pool(x)),
                                 self._mlp(ad.global_max_pool(x))))
        return ad.reshape(gate, (n, self.channels, 1, 1))

    def params(self):
        return [("fc1." + k, v) for k, v in self.fc1.params()] + \
               [("fc2." + k, v) for k, v in self.fc2.params()]


class SpatialAttention:
    """Per-position gate: sigmoid(conv7x7(concat(channel mean, channel max)))."""

    def __init__(self, rng: np.random.Generator, kernel: int = 7):
        fan_in = 2 * kernel * kernel
        self.w = Tensor(ad.kaiming_uniform((1, 2, kernel, kernel), fan_in, rng), requires_grad=True)
        self.b = Tensor(np.zeros(1), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        maps = ad.concat_channels(ad.mean_over(x, (1,)), ad.max_over(x, (1,)))
        return ad.sigmoid(ad.conv2d(maps, self.w, self.b, stride=1, padding="same"))

    def params(self):
        return [("w", self.w), ("b", self.b)]


class Cbam:
    """Channel gate followed by spatial gate, both multiplicative."""

    def __init__(self, channels: int, reduce: int, rng: np.random.Generator):
        self.channel = ChannelAttention(channels, reduce, rng)
        self.spatial = SpatialAttention(rng)

    def __call__(self, x: Tensor) -> Tensor:
        refined = ad.mul(x, self.channel(x))
        return ad.mul(refined, self.spatial(refined))

    def params(self):
        return [("channel." + k, v) for k, v in self.channel.params()] + \
               [("spatial." + k, v) for k, v in self.spatial.params()]


class FeatureAttention:
    """Flat-vector gate: x * sigmoid(MLP(x)) with a reduce-factor bottleneck."""

    def __init__(self, dim: int, reduce: int, rng: np.random.Generator):
        self.fc1 = _Linear(dim, dim // reduce, rng)
        self.fc2 = _Linear(dim // reduce, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        gate = ad.sigmoid(self.fc2(ad.relu(self.fc1(x))))
        return ad.mul(x, gate)

    def params(self):
        return [("fc1." + k, v) for k, v in self.fc1.params()] + \
               [("fc2." + k, v) for k, v in self.fc2.params()]


class SurvivalCnn:
    """Three attention-gated conv stages, feature gate, 32-d features, scalar risk."""

    def __init__(self, cfg: NetConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c, m = cfg.channels, cfg.bn_momentum
        self.conv1_1 = _Conv(3, c, 3, 4, rng)
        self.conv1_2 = _Conv(c, c, 3, 1, rng)
        self.conv1_3 = _Conv(c, c, 3, 1, rng)
        self.cbam1 = Cbam(c, cfg.cbam_reduce, rng)
        self.bn1 = _BatchNorm(c, m)
        self.conv2_1 = _Conv(c, c, 3, 2, rng)
        self.conv2_2 = _Conv(c, c, 3, 1, rng)
        self.cbam2 = Cbam(c, cfg.cbam_reduce, rng)
        self.conv3 = _Conv(c, c, 3, 2, rng)
        self.cbam3 = Cbam(c, cfg.cbam_reduce, rng)
        self.bn3 = _BatchNorm(c, m)
        self.gate4 = FeatureAttention(cfg.flatten_dim, cfg.nam_reduce, rng)
        self.fc = _Linear(cfg.flatten_dim, cfg.feature_dim, rng)
        self.risk_head = _Linear(cfg.feature_dim, 1, rng, bias=False)
        self._modules = [
            ("conv1_1", self.conv1_1), ("conv1_2", self.conv1_2), ("conv1_3", self.conv1_3),
            ("cbam1", self.cbam1), ("bn1", self.bn1),
            ("conv2_1", self.conv2_1), ("conv2_2", self.conv2_2), ("cbam2", self.cbam2),
            ("conv3", self.conv3), ("cbam3", self.cbam3), ("bn3", self.bn3),
            ("gate4", self.gate4), ("fc", self.fc), ("risk_head", self.risk_head),
        ]

    def forward(self, x: Tensor, training: bool) -> tuple[Tensor, Tensor]:
        """Return (risk (N,), features (N, feature_dim)) for an NCHW batch."""
        h = ad.relu(self.conv1_1(x))
        h = ad.relu(self.conv1_2(h))
        h = ad.relu(self.conv1_3(h))
        h = self.cbam1(h)
        h = self.bn1(h, training)
        h = ad.maxpool2d(h, 2)
        h = ad.relu(self.conv2_1(h))
        h = ad.relu(self.conv2_2(h))
        h = self.cbam2(h)
        h = ad.relu(self.conv3(h))
        h = self.cbam3(h)
        h = self.bn3(h, training)
        h = ad.maxpool2d(h, 2)
        n = h.data.shape[0]
        flat = ad.reshape(h, (n, self.cfg.flatten_dim))
        feats = self.fc(self.gate4(flat))
        risk = ad.reshape(self.risk_head(feats), (n,))
        return risk, feats

    def params(self) -> list[Tensor]:
        return [t for _, mod in self._modules for _, t in mod.params()]

    def named_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, mod in self._modules:
            for k, t in mod.params():
                out[f"{name}.{k}"] = t.data
            if isinstance(mod, _BatchNorm):
                for k, buf in mod.buffers():
                    out[f"{name}.{k}"] = buf
        return out

    def save(self, path) -> None:
        ad.save_tensors(path, self.named_tensors())

    @classmethod
    def load(cls, path, cfg: NetConfig) -> "SurvivalCnn":
        model = cls(cfg, seed=0)
        stored = ad.load_tensors(path)
        own = model.named_tensors()
        if set(stored) != set(own):
            raise ValueError(f"{path}: tensor names do not match the configured architecture")
        for name, mod in model._modules:
            for k, t in mod.params():
                arr = stored[f"{name}.{k}"]
                if arr.shape != t.data.shape:
                    raise ValueError(f"{path}: shape mismatch for {name}.{k}")
                t.data = arr.copy()
            if isinstance(mod, _BatchNorm):
                mod.running_mean[:] = stored[f"{name}.running_mean"]
                mod.running_var[:] = stored[f"{name}.running_var"]
        return model

    def infer(self, pixels: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode risks and features for uint8 patches (P, side, side, 3).

        Never mutates model state; deterministic for fixed weights.
        """
        risks, feats = [], []
        for lo in range(0, len(pixels), batch_size):
            x = prepare_batch(pixels[lo:lo + batch_size])
            r, f = self.forward(x, training=False)
            risks.append(r.data)
            feats.append(f.data)
        return np.concatenate(risks), np.concatenate(feats)


def prepare_batch(pixels: np.ndarray) -> Tensor:
    """HWC uint8 patches -> NCHW float64 in [0, 1]."""
    x = np.asarray(pixels, dtype=np.float64) / 255.0
    return Tensor(np.transpose(x, (0, 3, 1, 2)))


def cox_loss(risks: Tensor, times: np.ndarray, events: np.ndarray) -> Tensor:
    """Negative log partial likelihood summed over in-batch events.

    Risk sets are formed within the batch: subject j is at risk for event i
    when t_j >= t_i (Breslow handling of ties). The log-sum-exp is max-shifted
    for stability. Raises ValueError when the batch has no events.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    n = risks.data.shape[0]
    if times.shape != (n,) or events.shape != (n,):
        raise ValueError("times/events must align with the risk vector")
    if not events.any():
        raise ValueError("batch contains no events; the partial likelihood is undefined")

    order = np.argsort(-times, kind="stable")
    t_sorted = times[order]
    e_sorted = events[order]
    r_sorted = risks.data[order]
    shift = r_sorted.max()
    w = np.exp(r_sorted - shift)
    cw = np.cumsum(w)
    # positions sharing an observed time form a block in the sorted order;
    # every member's risk-set sum runs to the block's end
    block_end = np.empty(n, dtype=np.intp)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and t_sorted[j + 1] == t_sorted[i]:
            j += 1
        block_end[i:j + 1] = j
        i = j + 1
    denom = cw[block_end]
    loss_val = float(np.sum(np.log(denom[e_sorted]) + shift - r_sorted[e_sorted]))

    def bw(g):
        contrib = np.zeros(n)
        np.add.at(contrib, block_end[e_sorted], 1.0 / denom[e_sorted])
        coverage = np.cumsum(contrib[::-1])[::-1]
        grad_sorted = w * coverage - e_sorted.astype(np.float64)
        grad = np.empty(n)
        grad[order] = grad_sorted
        ad.accumulate(risks, float(g.reshape(())) * grad)

    return ad.record((risks,), np.asarray(loss_val), bw)


def stratified_batches(events: np.ndarray, batch_size: int,
                       rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle indices into batches, each guaranteed at least one event.

    When there are fewer events than ceil(n / batch_size) batches, the batch
    count drops to the event count (batches then exceed batch_size).
    """
    events = np.asarray(events, dtype=bool)
    n = len(events)
    n_events = int(events.sum())
    if n_events == 0:
        raise ValueError("cannot batch a sample with no events")
    n_batches = min(-(-n // batch_size), n_events)
    ev_idx = rng.permutation(np.flatnonzero(events))
    cen_idx = rng.permutation(np.flatnonzero(~events))
    batches: list[list[int]] = [[] for _ in range(n_batches)]
    for pos, idx in enumerate(ev_idx):
        batches[pos % n_batches].append(int(idx))
    # fill shortest-first so batch sizes stay within one of each other
    for idx in cen_idx:
        shortest = min(range(n_batches), key=lambda b: (len(batches[b]), b))
        batches[shortest].append(int(idx))
    return [np.array(sorted(b), dtype=np.intp) for b in batches]


def train_cluster_model(pixels: np.ndarray, times: np.ndarray, events: np.ndarray,
                        cfg: NetConfig, seed: int) -> tuple[SurvivalCnn, list[tuple[int, float, float]]]:
    """SGD-train one cluster model on uint8 patches (P, side, side, 3).

    Returns the model and a per-epoch trace of (epoch, mean batch loss, lr).
    Raises UntrainableClusterError when the cluster has fewer than 2 events.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if int(events.sum()) < 2:
        raise UntrainableClusterError(
            f"cluster has {int(events.sum())} event(s); at least 2 are required")
    model = SurvivalCnn(cfg, seed=seed)
    params = model.params()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    trace: list[tuple[int, float, float]] = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.lr0, cfg.lr_half_every)
        losses = []
        for batch_idx in stratified_batches(events, cfg.batch_size, rng):
            x = prepare_batch(pixels[batch_idx])
            for p in params:
                p.zero_grad()
            with ad.Tape() as tape:
                risk, _ = model.forward(x, training=True)
                loss = cox_loss(risk, times[batch_idx], events[batch_idx])
            tape.backward(loss, params=params)
            for p in params:
                p.data -= lr * p.grad
            losses.append(float(loss.data))
        mean_loss = float(np.mean(losses))
        if not math.isfinite(mean_loss):
            raise UntrainableClusterError(
                f"training diverged at epoch {epoch} (loss {mean_loss})")
        trace.append((epoch, mean_loss, lr))
    return model, trace
