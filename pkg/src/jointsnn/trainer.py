"""Joint ANN/SNN training loop.

One step composes both sides' weights, runs both forwards, forms

    L = L_CE + lambda_kld * L_KLD + lambda_norm * L_Norm

and takes a single Adam step over every parameter (shared factors, both
sigma vectors, per-side biases and normalization parameters).

Randomness is split by purpose: weight init draws from ``[seed, 0]``,
shuffling from ``[seed, 1, epoch]``, flips from ``[seed, 2, epoch]``.
The forward passes consume no randomness.
"""

from __future__ import annotations

import json
import logging
import math
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, encode_text, save_checkpoint
from .config import TrainConfig, parse_config
from .data import Batch, Dataset, batches, prefetch
from .errors import ConfigError, DataError, NumericError, SerializationError
from .losses import cross_entropy, kl_divergence, squared_distance
from .network import JointNetwork, StageSpec, build_mini_resnet, build_mini_vgg

log = logging.getLogger(__name__)

_FACTOR_RE = re.compile(r"\.(u|v|sigma_ann|sigma_snn)(\.k\d+_\d+)?$")
_NO_DECAY_RE = re.compile(r"\.(gamma|beta|b_ann|b_snn)$")


def build_network(cfg: TrainConfig, input_shape) -> JointNetwork:
    stages = [StageSpec(cfg.blocks, c, i > 0) for i, c in enumerate(cfg.channels)]
    build = build_mini_resnet if cfg.arch == "mini_resnet" else build_mini_vgg
    return build(stages, cfg.classes, cfg.lif(), cfg.time_steps, tuple(input_shape),
                 norm_enabled=cfg.norm_enabled, share_mode=cfg.share_mode,
                 factorize_stem_classifier=cfg.factorize_stem_classifier,
                 separate_head=cfg.separate_head, stem_stride=cfg.stem_stride, seed=cfg.seed)


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Cosine annealing from ``cfg.lr`` at epoch 0 towards ``cfg.lr_min``."""
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


def decays(name: str) -> bool:
    """Weight decay applies to weights and factors, not to norm parameters or biases."""
    return _NO_DECAY_RE.search(name) is None


def param_group(name: str) -> str:
    m = _FACTOR_RE.search(name)
    if m:
        return m.group(1)
    if name.endswith((".w", ".w_ann", ".w_snn")):
        return "dense"
    return "other"


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, cfg: TrainConfig) -> AdamState:
    """Bias-corrected Adam with L2 weight decay folded into the gradient."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if cfg.weight_decay and decays(name):
            g = g + cfg.weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return state


def _exits(net: JointNetwork, cfg: TrainConfig):
    """(cross-entropy exits, distillation exits) as 0-based indices."""
    n_out = net.n_branches + (1 if net.head is not None else 0)
    final = n_out - 1
    if cfg.branch_exits:
        return list(range(n_out)), list(range(net.n_branches))
    return [final], [final]


def _first_non_finite(named: list[tuple[str, Tensor]]) -> Optional[str]:
    for name, t in named:
        if not np.all(np.isfinite(t.data)):
            return name
    return None


def compute_losses(net: JointNetwork, images: Tensor, labels: np.ndarray, cfg: TrainConfig):
    """Forward both sides and build the loss terms. Returns (total, parts, outputs)."""
    ce_idx, kd_idx = _exits(net, cfg)
    ann = net.forward_ann(images) if cfg.use_ann else None
    snn, stats = net.forward_snn(images)
    named = []
    if ann is not None:
        named += [(f"ann.exit{i + 1}.logits", z) for i, z in enumerate(ann.logits)]
    named += [(f"snn.exit{i + 1}.logits", z) for i, z in enumerate(snn.logits)]
    bad = _first_non_finite(named)
    if bad:
        raise NumericError(f"non-finite values in {bad}")

    terms = []
    if ann is not None:
        terms += [cross_entropy(ann.logits[i], labels) for i in ce_idx]
    if cfg.use_snn_ce:
        terms += [cross_entropy(snn.logits[i], labels) for i in ce_idx]
    ce = _sum(terms)
    kld = norm = None
    if ann is not None and cfg.use_kld:
        kld = _sum([kl_divergence(ann.logits[i], snn.logits[i]) for i in kd_idx])
    if ann is not None and cfg.use_norm:
        a_f = ann.logits if cfg.norm_features == "logits" else ann.pooled
        s_f = snn.logits if cfg.norm_features == "logits" else snn.pooled
        norm = _sum([squared_distance(a_f[i], s_f[i]) for i in kd_idx])
    total = ce
    for term, weight in ((kld, cfg.lambda_kld), (norm, cfg.lambda_norm)):
        if term is not None:
            scaled = ad.mul_scalar(term, weight)
            total = scaled if total is None else ad.add(total, scaled)
    if total is None:
        raise ConfigError("every loss term is disabled; nothing to train")
    parts = {"l_ce": _value(ce), "l_kld": _value(kld), "l_norm": _value(norm), "l_total": _value(total)}
    for key, value in parts.items():
        if not math.isfinite(value):
            raise NumericError(f"non-finite value in {key}")
    return total, parts, (ann, snn, stats)


def _sum(terms):
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def _value(t: Optional[Tensor]) -> float:
    return 0.0 if t is None else float(t.data)


def train_step(net: JointNetwork, batch: Batch, cfg: TrainConfig, state: AdamState, lr: float) -> dict:
    """One joint optimization step. Returns loss values and per-group gradient norms."""
    if len(batch.labels) == 0:
        raise DataError("empty batch")
    net.train()
    params = net.parameters()
    images = Tensor(batch.images)
    try:
        with ad.Tape() as tape:
            total, parts, _ = compute_losses(net, images, batch.labels, cfg)
    except NumericError as exc:
        bad = _first_non_finite(list(params.items()))
        where = f"non-finite values in parameter {bad}" if bad else str(exc)
        raise NumericError(f"training aborted at step {state.t + 1}: {where}") from None
    tape.backward(total)
    grads = {}
    norms: dict[str, float] = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"training aborted at step {state.t + 1}: non-finite gradient for {name}")
        grads[name] = g
        grp = param_group(name)
        norms[grp] = norms.get(grp, 0.0) + float(np.sum(g * g))
        p.grad = None
    adam_step(params, grads, state, lr, cfg)
    metrics = dict(parts)
    metrics.update({f"grad_norm_{k}": math.sqrt(v) for k, v in sorted(norms.items())})
    metrics["lr"] = lr
    return metrics


@dataclass
class EvalResult:
    ann_top1: Optional[float]
    snn_top1: float
    ann_branches: Optional[list]
    snn_branches: list
    samples: int

    def as_dict(self) -> dict:
        return {"ann_top1": self.ann_top1, "snn_top1": self.snn_top1,
                "ann_branch_top1": self.ann_branches, "snn_branch_top1": self.snn_branches,
                "samples": self.samples}


def evaluate(net: JointNetwork, ds: Dataset, cfg: Optional[TrainConfig] = None, batch_size: int = 256,
             time_steps: Optional[int] = None) -> EvalResult:
    """Top-1 accuracy (percent) of every exit on both sides, running statistics in use.

    The last exit is the classifier head, so ``*_top1`` equals the last
    branch figure. ``time_steps`` overrides the SNN's T for this call only.
    """
    if len(ds) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    use_ann = cfg.use_ann if cfg is not None else True
    was_training, old_t = net.training, net.time_steps
    net.eval()
    if time_steps is not None:
        if time_steps < 1:
            raise ConfigError(f"time_steps must be at least 1, got {time_steps}")
        net.time_steps = time_steps
    n_out = net.n_branches + (1 if net.head is not None else 0)
    ann_hits = np.zeros(n_out, dtype=np.int64)
    snn_hits = np.zeros(n_out, dtype=np.int64)
    try:
        for b in batches(ds, batch_size):
            x = Tensor(b.images)
            if use_ann:
                for i, z in enumerate(net.forward_ann(x).logits):
                    ann_hits[i] += int(np.sum(np.argmax(z.data, axis=1) == b.labels))
            out, _ = net.forward_snn(x)
            for i, z in enumerate(out.logits):
                snn_hits[i] += int(np.sum(np.argmax(z.data, axis=1) == b.labels))
    finally:
        net.train(was_training)
        net.time_steps = old_t
    n = len(ds)
    snn_acc = [float(100.0 * h / n) for h in snn_hits]
    ann_acc = [float(100.0 * h / n) for h in ann_hits] if use_ann else None
    return EvalResult(ann_acc[-1] if use_ann else None, snn_acc[-1], ann_acc, snn_acc, n)


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


class Trainer:
    """Owns a network, its optimizer state and the position in the data stream."""

    def __init__(self, cfg: TrainConfig, input_shape, net: Optional[JointNetwork] = None):
        self.cfg = cfg
        self.input_shape = tuple(input_shape)
        self.net = net if net is not None else build_network(cfg, self.input_shape)
        self.adam = AdamState()
        self.epoch = 0
        self.batch_in_epoch = 0
        self.epoch_sums = np.zeros(5)  # l_ce, l_kld, l_norm, l_total, samples

    # -- data stream -----------------------------------------------------
    def _epoch_batches(self, ds: Dataset):
        cfg = self.cfg
        flip = _derived_seed(cfg.seed, 2, self.epoch) if cfg.dataset == "cifar10" and cfg.hflip else None
        it = batches(ds, cfg.batch_size, _derived_seed(cfg.seed, 1, self.epoch), flip, start=self.batch_in_epoch)
        return prefetch(it, cfg.prefetch)

    def steps_per_epoch(self, ds: Dataset) -> int:
        return -(-len(ds) // self.cfg.batch_size)

    def step(self, batch: Batch) -> dict:
        lr = cosine_lr(self.epoch, self.cfg)
        m = train_step(self.net, batch, self.cfg, self.adam, lr)
        n = len(batch.labels)
        self.epoch_sums += np.array([m["l_ce"] * n, m["l_kld"] * n, m["l_norm"] * n, m["l_total"] * n, n])
        self.batch_in_epoch += 1
        return m

    def train_steps(self, ds: Dataset, n_steps: int) -> list[dict]:
        """Run ``n_steps`` optimizer steps, rolling over epoch boundaries without evaluating."""
        out = []
        while len(out) < n_steps:
            for batch in self._epoch_batches(ds):
                out.append(self.step(batch))
                if len(out) == n_steps:
                    break
            if self.batch_in_epoch >= self.steps_per_epoch(ds):
                self._end_epoch()
        return out

    def _end_epoch(self) -> dict:
        s = self.epoch_sums
        n = max(s[4], 1.0)
        means = {"l_ce": s[0] / n, "l_kld": s[1] / n, "l_norm": s[2] / n, "l_total": s[3] / n}
        self.epoch += 1
        self.batch_in_epoch = 0
        self.epoch_sums = np.zeros(5)
        return means

    def run_epoch(self, ds: Dataset) -> dict:
        lr = cosine_lr(self.epoch, self.cfg)
        for batch in self._epoch_batches(ds):
            self.step(batch)
        means = self._end_epoch()
        means["lr"] = lr
        return means

    def fit(self, train: Dataset, test: Dataset, out_dir=None, on_epoch: Optional[Callable] = None) -> list[dict]:
        """Train to ``cfg.epochs``, evaluating and logging after every epoch.

        With ``out_dir`` each epoch appends one JSON line to
        ``metrics.jsonl`` and every ``checkpoint_every`` epochs (and at the
        end) the state is written to ``checkpoint.jasn``.
        """
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        history = []
        while self.epoch < self.cfg.epochs:
            t0 = time.perf_counter()
            epoch = self.epoch
            means = self.run_epoch(train)
            result = evaluate(self.net, test, self.cfg)
            line = {"epoch": epoch + 1, "lr": means["lr"], "l_ce": means["l_ce"], "l_kld": means["l_kld"],
                    "l_norm": means["l_norm"], "l_total": means["l_total"],
                    "ann_top1": result.ann_top1, "snn_top1": result.snn_top1,
                    "ann_branch_top1": result.ann_branches, "snn_branch_top1": result.snn_branches,
                    "wall_seconds": round(time.perf_counter() - t0, 3)}
            history.append(line)
            log.info("epoch %d/%d  loss %.4f  ann %s  snn %.2f", epoch + 1, self.cfg.epochs, line["l_total"],
                     "-" if result.ann_top1 is None else f"{result.ann_top1:.2f}", result.snn_top1)
            if out is not None:
                with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(line) + "\n")
                if self.epoch % self.cfg.checkpoint_every == 0 or self.epoch == self.cfg.epochs:
                    self.save(out / "checkpoint.jasn")
            if on_epoch is not None:
                on_epoch(line)
        return history

    # -- persistence -----------------------------------------------------
    def state_records(self) -> dict[str, np.ndarray]:
        rec = {name: p.data for name, p in self.net.parameters().items()}
        rec.update(self.net.buffers())
        for name in self.net.parameters():
            if name in self.adam.m:
                rec[f"adam.m.{name}"] = self.adam.m[name]
                rec[f"adam.v.{name}"] = self.adam.v[name]
        rec["meta.adam_t"] = np.array(float(self.adam.t))
        rec["meta.epoch"] = np.array(float(self.epoch))
        rec["meta.batch_in_epoch"] = np.array(float(self.batch_in_epoch))
        rec["meta.seed"] = np.array(float(self.cfg.seed))
        rec["meta.epoch_sums"] = self.epoch_sums.copy()
        rec["meta.input_shape"] = np.array(self.input_shape, dtype=np.float64)
        rec["meta.config"] = encode_text(self.cfg.to_text())
        return rec

    def save(self, path) -> None:
        save_checkpoint(path, self.state_records())

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, overrides: Optional[dict] = None) -> "Trainer":
        try:
            cfg = parse_config(ckpt.config_text, overrides)
            shape = tuple(int(x) for x in ckpt.records["meta.input_shape"])
        except KeyError as exc:
            raise SerializationError(f"checkpoint lacks record {exc.args[0]!r}") from None
        trainer = cls(cfg, shape)
        params = trainer.net.parameters()
        buffers = trainer.net.buffers()
        for name, p in params.items():
            if name not in ckpt.records:
                raise SerializationError(f"checkpoint has no record for parameter {name!r}")
            arr = ckpt.records[name]
            if arr.shape != p.shape:
                raise SerializationError(f"record {name!r} has shape {arr.shape}, network expects {p.shape}")
            p.data = arr.copy()
            if f"adam.m.{name}" in ckpt.records:
                trainer.adam.m[name] = ckpt.records[f"adam.m.{name}"].copy()
                trainer.adam.v[name] = ckpt.records[f"adam.v.{name}"].copy()
        for name in buffers:
            if name not in ckpt.records:
                raise SerializationError(f"checkpoint has no record for buffer {name!r}")
            trainer.net.set_buffer(name, ckpt.records[name])
        known = set(params) | set(buffers)
        extra = [n for n in ckpt.records if not n.startswith(("adam.", "meta.")) and n not in known]
        if extra:
            raise SerializationError(f"checkpoint record {extra[0]!r} does not match the network")
        trainer.adam.t = ckpt.meta("adam_t")
        trainer.epoch = ckpt.meta("epoch")
        trainer.batch_in_epoch = ckpt.meta("batch_in_epoch")
        trainer.epoch_sums = ckpt.records["meta.epoch_sums"].copy()
        return trainer
