"""Flat JSON run configuration for the command-line tools."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .layers import ModelConfig
from .trainer import VARIANTS, TrainConfig

_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"n_channels", "length", "n_classes"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


@dataclass
class RunConfig:
    dataset: Optional[str] = None
    out_dir: str = "runs"
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    split: list = field(default_factory=lambda: [0.6, 0.2, 0.2])
    split_seed: int = 0
    variant: str = "full"
    variants: list = field(default_factory=lambda: list(VARIANTS))
    parallel: int = 1
    # model
    n_scales: int = 4
    hidden_dim: int = 64
    n_heads: int = 4
    se_ratio: int = 4
    encoder_layers: int = 2
    conv_kernel: int = 3
    lambda_sim: float = 0.1
    lambda_diff: float = 0.1
    dropout_p: float = 0.1
    causal: bool = True
    se: bool = True
    mlp_head_only: bool = False
    use_encoder: bool = True
    # trainer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    # optional consistency checks against the dataset
    n_channels: Optional[int] = None
    length: Optional[int] = None
    n_classes: Optional[int] = None

    def __post_init__(self):
        if not isinstance(self.seeds, list) or not self.seeds or \
                not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds: expected a non-empty list of non-negative integers")
        if len(self.split) != 3:
            raise ConfigError("split: expected three fractions")
        for name in (self.variant, *self.variants):
            if name not in VARIANTS:
                raise ConfigError(f"unknown variant {name!r}; expected one of {list(VARIANTS)}")
        if self.parallel < 1:
            raise ConfigError("parallel must be >= 1")
        self.train_config()
        # model hyperparameters are checked here, before any data is read
        if not isinstance(self.n_scales, int) or self.n_scales < 1:
            raise ConfigError(f"n_scales must be a positive integer, got {self.n_scales!r}")
        self.model_config(self.n_channels or 1, self.length or 2 ** (self.n_scales - 1),
                          self.n_classes or 2)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in _TRAIN_KEYS})

    def model_config(self, n_channels: int, length: int, n_classes: int) -> ModelConfig:
        for key, actual in (("n_channels", n_channels), ("length", length), ("n_classes", n_classes)):
            want = getattr(self, key)
            if want is not None and want != actual:
                raise ConfigError(f"{key}={want} in config but dataset has {actual}")
        return ModelConfig(n_channels=n_channels, length=length, n_classes=n_classes,
                           **{k: getattr(self, k) for k in _MODEL_KEYS})
