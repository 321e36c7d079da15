"""Paired ANN/SNN stage networks over shared (factorized) weights.

Both sides walk the same topology. The ANN applies ReLU; the SNN applies
LIF neurons over ``time_steps`` steps. Every weight is held by a
:class:`SharedWeight`, which hands each side its own composed tensor
according to the sharing mode:

* ``wft``  - per-entry SVD factors, shared U/V, one sigma per side
* ``full`` - one dense weight used by both sides
* ``none`` - two independent dense weights (identical at init)

SNN activations are carried time-major and flattened, ``[T*N, C, H, W]``,
so each convolution runs once over all steps; LIF layers unflatten to
``[T, N, ...]`` to run the recurrence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor
from .errors import ConfigError, DimensionError
from .lif import LifConfig, lif_forward
from .svd import SIDES, compose, compose_conv, init_factorized, kaiming_uniform

SHARE_MODES = ("wft", "full", "none")


class SharedWeight:
    """One layer's weight, shaped [c_out, c_in, k, k] for convs or [c_in, c_out] for FC."""

    def __init__(self, name: str, w0: np.ndarray, mode: str, conv: bool):
        if mode not in SHARE_MODES:
            raise ConfigError(f"share_mode must be one of {SHARE_MODES}, got {mode!r}")
        self.name, self.mode, self.conv = name, mode, conv
        self.shape = w0.shape
        if mode == "wft":
            if conv:
                k = w0.shape[2]
                # each kernel entry is a [c_in x c_out] matrix
                self.grid = [[init_factorized(w0[:, :, i, j].T, (i, j)) for j in range(k)] for i in range(k)]
            else:
                self.grid = [[init_factorized(w0)]]
        elif mode == "full":
            self.dense = Tensor(w0.copy(), requires_grad=True)
        else:
            self.dense_ann = Tensor(w0.copy(), requires_grad=True)
            self.dense_snn = Tensor(w0.copy(), requires_grad=True)

    def weight(self, side: str) -> Tensor:
        if self.mode == "wft":
            if self.conv:
                return compose_conv(self.grid, side)
            return compose(self.grid[0][0], side)
        if self.mode == "full":
            return self.dense
        return self.dense_ann if side == "ann" else self.dense_snn

    def parameters(self) -> dict[str, Tensor]:
        if self.mode == "wft":
            out = {}
            for row in self.grid:
                for fw in row:
                    suffix = f".k{fw.kernel_index[0]}_{fw.kernel_index[1]}" if self.conv else ""
                    for key, t in fw.parameters().items():
                        out[f"{self.name}.{key}{suffix}"] = t
            return out
        if self.mode == "full":
            return {f"{self.name}.w": self.dense}
        return {f"{self.name}.w_ann": self.dense_ann, f"{self.name}.w_snn": self.dense_snn}


class Conv:
    def __init__(self, name, c_in, c_out, k, stride, padding, mode, rng):
        if k not in (1, 3) or stride not in (1, 2) or padding not in (0, 1):
            raise ConfigError(f"{name}: unsupported conv geometry k={k} stride={stride} padding={padding}")
        self.name, self.c_in, self.c_out, self.k = name, c_in, c_out, k
        self.stride, self.padding = stride, padding
        w0 = kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k)
        self.weight = SharedWeight(name, w0, mode, conv=True)

    def __call__(self, x: Tensor, side: str, kernel: Optional[Tensor] = None) -> Tensor:
        return ad.conv2d(x, kernel if kernel is not None else self.weight.weight(side), self.stride, self.padding)

    def out_hw(self, h, w):
        return ((h + 2 * self.padding - self.k) // self.stride + 1,
                (w + 2 * self.padding - self.k) // self.stride + 1)

    def parameters(self):
        return self.weight.parameters()


class Linear:
    """Fully connected layer ``x @ W + b`` with a per-side bias."""

    def __init__(self, name, c_in, c_out, mode, rng):
        self.name, self.c_in, self.c_out = name, c_in, c_out
        w0 = kaiming_uniform(rng, (c_in, c_out), c_in)
        self.weight = SharedWeight(name, w0, mode, conv=False)
        self.bias = {side: Tensor(np.zeros(c_out), requires_grad=True) for side in SIDES}

    def __call__(self, x: Tensor, side: str, matrix: Optional[Tensor] = None) -> Tensor:
        w = matrix if matrix is not None else self.weight.weight(side)
        return ad.add(ad.matmul(x, w), self.bias[side])

    def parameters(self):
        out = self.weight.parameters()
        for side in SIDES:
            out[f"{self.name}.b_{side}"] = self.bias[side]
        return out


class BatchNorm:
    """Independent normalization parameters and statistics for each side."""

    def __init__(self, name, channels):
        self.name = name
        self.gamma = {s: Tensor(np.ones(channels), requires_grad=True) for s in SIDES}
        self.beta = {s: Tensor(np.zeros(channels), requires_grad=True) for s in SIDES}
        self.stats = {s: RunningStats(channels) for s in SIDES}

    def __call__(self, x: Tensor, side: str, training: bool) -> Tensor:
        return ad.batch_norm(x, self.gamma[side], self.beta[side], self.stats[side], training)

    def parameters(self):
        out = {}
        for s in SIDES:
            out[f"{self.name}.{s}.gamma"] = self.gamma[s]
            out[f"{self.name}.{s}.beta"] = self.beta[s]
        return out


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    channels: int
    downsample: bool

    def __post_init__(self):
        if self.blocks < 1 or self.channels < 1:
            raise ConfigError(f"invalid stage {self}: blocks and channels must be positive")


@dataclass
class LayerInfo:
    """One synaptic layer as the energy model sees it."""

    name: str
    kind: str  # "conv" or "fc"
    c_in: int
    c_out: int
    k: int
    stride: int
    padding: int
    in_hw: tuple
    out_hw: tuple
    source: str  # activation feeding this layer, or "input"

    @property
    def macs(self) -> int:
        if self.kind == "fc":
            return self.c_in * self.c_out
        return self.c_out * self.c_in * self.k * self.k * self.out_hw[0] * self.out_hw[1]

    @property
    def synaptic_ops(self) -> int:
        """Real (non-padding) synapses: the dense op count an event-driven layer can reach per step."""
        return int(self.fanout_map().sum()) * self.c_in

    def fanout_map(self) -> np.ndarray:
        """Synapses driven by each input position, per channel: [H_in, W_in]."""
        if self.kind == "fc":
            return np.full(self.in_hw, self.c_out, dtype=np.int64)
        h, w = self.in_hw
        ho, wo = self.out_hw
        rows = np.zeros(h, dtype=np.int64)
        cols = np.zeros(w, dtype=np.int64)
        for i in range(self.k):
            r = np.arange(ho) * self.stride + i - self.padding
            rows[r[(r >= 0) & (r < h)]] += 1
            c = np.arange(wo) * self.stride + i - self.padding
            cols[c[(c >= 0) & (c < w)]] += 1
        return np.outer(rows, cols) * self.c_out


@dataclass
class ActivationInfo:
    name: str
    shape: tuple  # per-sample (C, H, W)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class Topology:
    layers: list[LayerInfo]
    activations: list[ActivationInfo]
    input_shape: tuple


@dataclass
class SpikeStats:
    """Spike counts per LIF layer, summed over batch and channels: [T, H, W] maps."""

    batch: int
    time_steps: int
    maps: dict = field(default_factory=dict)
    neurons: dict = field(default_factory=dict)  # per-sample neuron count
    channels_active: dict = field(default_factory=dict)  # [T] count of (sample, channel) pairs that fired
    spikes: Optional[dict] = None  # raw spike arrays when recording

    def add(self, name: str, s: np.ndarray) -> None:
        """Record one layer's spikes, shaped [T, N, C, H, W]."""
        self.maps[name] = s.sum(axis=(1, 2))
        self.neurons[name] = int(np.prod(s.shape[2:]))
        flat = s.reshape(s.shape[0], s.shape[1], s.shape[2], -1)
        self.channels_active[name] = (flat.max(axis=3) > 0).sum(axis=(1, 2))
        if self.spikes is not None:
            self.spikes[name] = s.copy()

    def total(self, layer: str) -> int:
        return int(self.maps[layer].sum())

    def rate(self, layer: str) -> float:
        return self.total(layer) / (self.batch * self.time_steps * self.neurons[layer])


class _Context:
    """Per-forward scratch: composed weights and spike recording."""

    def __init__(self, net, side, stats=None):
        self.net, self.side, self.stats = net, side, stats
        self.cache = {}

    def weight(self, layer):
        w = self.cache.get(layer.name)
        if w is None:
            w = self.cache[layer.name] = layer.weight.weight(self.side)
        return w

    def conv(self, layer: Conv, x):
        return layer(x, self.side, self.weight(layer))

    def linear(self, layer: Linear, x):
        return layer(x, self.side, self.weight(layer))

    def bn(self, bn: Optional[BatchNorm], x):
        return x if bn is None else bn(x, self.side, self.net.training)

    def act(self, name, x):
        """ReLU for the ANN; LIF over time for the SNN (x is [T*N, ...])."""
        if self.side == "ann":
            return ad.relu(x)
        t = self.net.time_steps
        shape = x.shape
        seq = ad.reshape(x, (t, shape[0] // t) + shape[1:])
        rec = {} if self.stats is not None and self.stats.spikes is not None else None
        spikes = lif_forward(seq, self.net.lif_cfg, record=rec)
        if self.stats is not None:
            self.stats.add(name, spikes.data)
            if rec is not None:
                self.stats.spikes[name + ".u"] = rec["u"]
        return ad.reshape(spikes, shape)


class ResidualBlock:
    def __init__(self, name, c_in, c_out, stride, mode, norm, rng):
        self.name = name
        self.conv1 = Conv(f"{name}.conv1", c_in, c_out, 3, stride, 1, mode, rng)
        self.bn1 = BatchNorm(f"{name}.bn1", c_out) if norm else None
        self.conv2 = Conv(f"{name}.conv2", c_out, c_out, 3, 1, 1, mode, rng)
        self.bn2 = BatchNorm(f"{name}.bn2", c_out) if norm else None
        self.proj = None
        if stride != 1 or c_in != c_out:
            self.proj = Conv(f"{name}.shortcut", c_in, c_out, 1, stride, 0, mode, rng)
            self.proj_bn = BatchNorm(f"{name}.shortcut_bn", c_out) if norm else None

    def forward(self, ctx: _Context, x):
        h = ctx.act(f"{self.name}.act1", ctx.bn(self.bn1, ctx.conv(self.conv1, x)))
        h = ctx.bn(self.bn2, ctx.conv(self.conv2, h))
        skip = x if self.proj is None else ctx.bn(self.proj_bn, ctx.conv(self.proj, x))
        # activation outside the sum: g(f(x) + x)
        return ctx.act(f"{self.name}.act2", ad.add(h, skip))

    def modules(self):
        mods = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.proj is not None:
            mods += [self.proj, self.proj_bn]
        return [m for m in mods if m is not None]

    def describe(self, hw, source):
        layers, acts = [], []
        c1 = self.conv1
        h1 = c1.out_hw(*hw)
        layers.append(_info(c1, hw, h1, source))
        acts.append(ActivationInfo(f"{self.name}.act1", (c1.c_out,) + h1))
        layers.append(_info(self.conv2, h1, h1, f"{self.name}.act1"))
        if self.proj is not None:
            layers.append(_info(self.proj, hw, self.proj.out_hw(*hw), source))
        acts.append(ActivationInfo(f"{self.name}.act2", (c1.c_out,) + h1))
        return layers, acts, h1, f"{self.name}.act2"


class PlainBlock:
    """conv -> norm -> activation, used by the VGG-style builder."""

    def __init__(self, name, c_in, c_out, stride, mode, norm, rng):
        self.name = name
        self.conv = Conv(f"{name}.conv", c_in, c_out, 3, stride, 1, mode, rng)
        self.bn = BatchNorm(f"{name}.bn", c_out) if norm else None

    def forward(self, ctx: _Context, x):
        return ctx.act(f"{self.name}.act", ctx.bn(self.bn, ctx.conv(self.conv, x)))

    def modules(self):
        return [m for m in (self.conv, self.bn) if m is not None]

    def describe(self, hw, source):
        h1 = self.conv.out_hw(*hw)
        return ([_info(self.conv, hw, h1, source)],
                [ActivationInfo(f"{self.name}.act", (self.conv.c_out,) + h1)], h1, f"{self.name}.act")


def _info(conv: Conv, hw, out_hw, source):
    return LayerInfo(conv.name, "conv", conv.c_in, conv.c_out, conv.k, conv.stride, conv.padding,
                     tuple(hw), tuple(out_hw), source)


@dataclass
class SideOutputs:
    logits: list[Tensor]
    pooled: list[Tensor]


class JointNetwork:
    """Stem, four stages of blocks, and a GAP + FC exit after every stage."""

    def __init__(self, arch, stages, classes, input_shape, lif_cfg, time_steps, norm_enabled=True,
                 share_mode="wft", factorize_stem_classifier=True, separate_head=False,
                 stem_channels=None, stem_stride=1, seed=0):
        if time_steps < 1:
            raise ConfigError(f"time_steps must be at least 1, got {time_steps}")
        if arch not in ("mini_resnet", "mini_vgg"):
            raise ConfigError(f"unknown arch {arch!r}")
        if not stages:
            raise ConfigError("at least one stage is required")
        if share_mode not in SHARE_MODES:
            raise ConfigError(f"share_mode must be one of {SHARE_MODES}, got {share_mode!r}")
        self.arch, self.stage_specs, self.classes = arch, list(stages), classes
        self.input_shape = tuple(input_shape)
        self.lif_cfg, self.time_steps, self.norm_enabled = lif_cfg, time_steps, norm_enabled
        self.share_mode, self.separate_head = share_mode, separate_head
        self.training = True
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        edge_mode = share_mode if factorize_stem_classifier else "none"

        c_in = self.input_shape[0]
        c0 = stem_channels or stages[0].channels
        self.stem = Conv("stem.conv", c_in, c0, 3, stem_stride, 1, edge_mode, rng)
        self.stem_bn = BatchNorm("stem.bn", c0) if norm_enabled else None
        block_cls = ResidualBlock if arch == "mini_resnet" else PlainBlock
        self.stages = []
        prev = c0
        for si, spec in enumerate(stages, start=1):
            blocks = []
            for bi in range(spec.blocks):
                stride = 2 if spec.downsample and bi == 0 else 1
                blocks.append(block_cls(f"stage{si}.block{bi + 1}", prev, spec.channels, stride,
                                        share_mode, norm_enabled, rng))
                prev = spec.channels
            self.stages.append(blocks)
        self.exits = [Linear(f"exit{i}.fc", spec.channels, classes, edge_mode, rng)
                      for i, spec in enumerate(stages, start=1)]
        self.head = Linear("head.fc", stages[-1].channels, classes, edge_mode, rng) if separate_head else None

    # ------------------------------------------------------------------
    @property
    def n_branches(self) -> int:
        return len(self.stages)

    def modules(self):
        mods = [self.stem] + ([self.stem_bn] if self.stem_bn else [])
        for blocks in self.stages:
            for b in blocks:
                mods += b.modules()
        mods += self.exits
        if self.head is not None:
            mods.append(self.head)
        return mods

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for m in self.modules():
            out.update(m.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for m in self.modules():
            if isinstance(m, BatchNorm):
                for s in SIDES:
                    out[f"{m.name}.{s}.running_mean"] = m.stats[s].mean
                    out[f"{m.name}.{s}.running_var"] = m.stats[s].var
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        for m in self.modules():
            if isinstance(m, BatchNorm) and name.startswith(m.name + "."):
                side, field_ = name[len(m.name) + 1:].split(".")
                setattr(m.stats[side], "mean" if field_ == "running_mean" else "var", np.array(value, dtype=float))
                return
        raise KeyError(name)

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.parameters().values()))

    def train(self, flag: bool = True) -> "JointNetwork":
        self.training = flag
        return self

    def eval(self) -> "JointNetwork":
        return self.train(False)

    # ------------------------------------------------------------------
    def _check_input(self, images: Tensor):
        if images.ndim != 4 or tuple(images.shape[1:]) != self.input_shape:
            raise DimensionError(f"expected images [N, {', '.join(map(str, self.input_shape))}], got {images.shape}")

    def _exits(self, ctx, features, time_steps):
        logits, pooled = [], []
        heads = list(zip(self.exits, features))
        if self.head is not None:
            heads.append((self.head, features[-1]))
        for fc, f in heads:
            p = ad.global_avg_pool(f)
            z = ctx.linear(fc, p)
            if ctx.side == "snn":
                t = time_steps
                n = p.shape[0] // t
                z = ad.mean(ad.reshape(z, (t, n, z.shape[1])), axis=0)
                p = ad.mean(ad.reshape(p, (t, n, p.shape[1])), axis=0)
            logits.append(z)
            pooled.append(p)
        return SideOutputs(logits, pooled)

    def forward_ann(self, images: Tensor) -> SideOutputs:
        self._check_input(images)
        ctx = _Context(self, "ann")
        h = ctx.act("stem.act", ctx.bn(self.stem_bn, ctx.conv(self.stem, images)))
        features = []
        for blocks in self.stages:
            for b in blocks:
                h = b.forward(ctx, h)
            features.append(h)
        return self._exits(ctx, features, 1)

    def forward_snn(self, images: Tensor, record_spikes: bool = False) -> tuple[SideOutputs, SpikeStats]:
        """Direct encoding: the analog image drives the stem at every step."""
        self._check_input(images)
        t = self.time_steps
        stats = SpikeStats(images.shape[0], t, spikes={} if record_spikes else None)
        ctx = _Context(self, "snn", stats)
        c = ctx.bn(self.stem_bn, ctx.conv(self.stem, images))
        c = ad.reshape(ad.repeat(c, t), (t * c.shape[0],) + c.shape[1:])
        h = ctx.act("stem.act", c)
        features = []
        for blocks in self.stages:
            for b in blocks:
                h = b.forward(ctx, h)
            features.append(h)
        return self._exits(ctx, features, t), stats

    # ------------------------------------------------------------------
    def topology(self) -> Topology:
        """Synaptic layers on the inference path (stem, body, final exit)."""
        hw = self.input_shape[1:]
        h1 = self.stem.out_hw(*hw)
        layers = [_info(self.stem, hw, h1, "input")]
        acts = [ActivationInfo("stem.act", (self.stem.c_out,) + h1)]
        hw, source = h1, "stem.act"
        for blocks in self.stages:
            for b in blocks:
                ls, a_s, hw, source = b.describe(hw, source)
                layers += ls
                acts += a_s
        final = self.head if self.head is not None else self.exits[-1]
        layers.append(LayerInfo(final.name, "fc", final.c_in, final.c_out, 1, 1, 0, (1, 1), (1, 1), source))
        return Topology(layers, acts, self.input_shape)

    def stage_layer_names(self) -> list[list[str]]:
        return [[n for b in blocks for m in b.modules() for n in m.parameters()] for blocks in self.stages]


def default_stages(channels=(16, 32, 64, 128), blocks=1) -> list[StageSpec]:
    return [StageSpec(blocks, c, i > 0) for i, c in enumerate(channels)]


def build_mini_resnet(spec=None, classes=10, lif_cfg=None, T=2, input_shape=(1, 28, 28), **kw) -> JointNetwork:
    spec = default_stages() if spec is None else spec
    return JointNetwork("mini_resnet", spec, classes, input_shape, lif_cfg or LifConfig(), T, **kw)


def build_mini_vgg(spec=None, classes=10, lif_cfg=None, T=2, input_shape=(1, 28, 28), **kw) -> JointNetwork:
    spec = default_stages() if spec is None else spec
    return JointNetwork("mini_vgg", spec, classes, input_shape, lif_cfg or LifConfig(), T, **kw)


def forward_ann(net: JointNetwork, images: Tensor) -> SideOutputs:
    return net.forward_ann(images)


def forward_snn(net: JointNetwork, images: Tensor, record_spikes: bool = False):
    return net.forward_snn(images, record_spikes)
