"""Flat ``key = value`` configuration files.

Lines are ``key = value``; ``#`` starts a comment; strings may be quoted.
Unknown keys are a hard error that names the closest valid key, so a typo
in an ablation config cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import difflib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError
from .lif import LifConfig
from .losses import LossWeights


@dataclass
class TrainConfig:
    # architecture
    arch: str = "mini_resnet"
    stages: int = 4
    channels: tuple = (16, 32, 64, 128)
    blocks: int = 1
    stem_stride: int = 1
    time_steps: int = 2
    classes: int = 10
    norm_enabled: bool = True
    share_mode: str = "wft"
    factorize_stem_classifier: bool = True
    separate_head: bool = False
    # LIF
    tau: float = 0.5
    v_th: float = 1.0
    surrogate: str = "triangular"
    gamma: float = 1.0
    surrogate_width: float = 1.0
    reset_detach: bool = True
    # objective and ablation switches
    lambda_kld: float = 1.0
    lambda_norm: float = 0.3
    use_ann: bool = True
    use_snn_ce: bool = True
    use_kld: bool = True
    use_norm: bool = True
    branch_exits: bool = True
    norm_features: str = "logits"
    # optimization
    epochs: int = 40
    lr: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    seed: int = 0
    # data
    dataset: str = "mnist"
    train_limit: int = 0
    test_limit: int = 0
    synthetic_n: int = 512
    hflip: bool = True
    # bookkeeping
    checkpoint_every: int = 1
    prefetch: int = 2
    # energy model
    energy_batch: int = 256
    e_mac_pj: float = 4.6
    e_acc_pj: float = 0.9
    e_move_min_pj: float = 10.0
    e_move_max_pj: float = 100.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    def validate(self) -> None:
        positive = ("stages", "blocks", "time_steps", "classes", "epochs", "batch_size", "stem_stride",
                    "checkpoint_every", "energy_batch", "synthetic_n")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        for key in ("lr", "e_mac_pj", "e_acc_pj", "e_move_min_pj", "e_move_max_pj", "eps"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        for key in ("weight_decay", "lambda_kld", "lambda_norm", "lr_min", "train_limit", "test_limit", "prefetch"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative, got {getattr(self, key)}")
        if len(self.channels) != self.stages:
            raise ConfigError(f"channels lists {len(self.channels)} values but stages = {self.stages}")
        if self.arch not in ("mini_resnet", "mini_vgg"):
            raise ConfigError(f"arch must be mini_resnet or mini_vgg, got {self.arch!r}")
        if self.share_mode not in ("wft", "full", "none"):
            raise ConfigError(f"share_mode must be wft, full or none, got {self.share_mode!r}")
        if self.norm_features not in ("logits", "pooled"):
            raise ConfigError(f"norm_features must be logits or pooled, got {self.norm_features!r}")
        if self.dataset not in ("mnist", "cifar10", "blobs", "spirals"):
            raise ConfigError(f"dataset must be mnist, cifar10, blobs or spirals, got {self.dataset!r}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("adam betas must lie in (0, 1)")
        self.lif()  # validates the neuron parameters

    def lif(self) -> LifConfig:
        return LifConfig(self.tau, self.v_th, self.surrogate, self.gamma, self.surrogate_width, self.reset_detach)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_kld, self.lambda_norm)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


# `use_wft` is accepted as shorthand for share_mode = wft / none
ALIASES = ("use_wft",)
VALID_KEYS = tuple(f.name for f in fields(TrainConfig)) + ALIASES


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, str):
        return f'"{v}"'
    return repr(v)


def _coerce(key: str, raw: str, lineno: int):
    target = {f.name: f for f in fields(TrainConfig)}.get(key)
    default = target.default if target is not None else False
    text = raw.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.replace("[", "").replace("]", "").split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse {raw.strip()!r} as a value for {key}") from None
    return text


def nearest_key(key: str) -> Optional[str]:
    match = difflib.get_close_matches(key, VALID_KEYS, n=1, cutoff=0.0)
    return match[0] if match else None


def parse_config(text: str, overrides: Optional[dict] = None) -> TrainConfig:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in VALID_KEYS:
            raise ConfigError(f"unknown config key {key!r} (line {lineno}); did you mean {nearest_key(key)!r}?")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, lineno)
    values.update(overrides or {})
    if "use_wft" in values:
        wft = values.pop("use_wft")
        implied = "wft" if wft else "none"
        if values.get("share_mode", implied) != implied:
            raise ConfigError(f"use_wft = {format_value(wft)} contradicts share_mode = {values['share_mode']!r}")
        values["share_mode"] = implied
    return TrainConfig(**values)


def load_config(path, overrides: Optional[dict] = None) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides)
