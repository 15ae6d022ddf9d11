"""Adam optimization of the composite objective, epoch loop with early
stopping, evaluation, and ablation variants."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .data import Dataset, batch_iter
from .errors import ConfigError, NumericalError
from .layers import ModelConfig, ParameterStore, init_params, model_forward
from .losses import LossBreakdown, total_loss
from .metrics import MetricsReport, compute_metrics
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ConfigError("invalid Adam hyperparameters")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("batch_size, max_epochs must be >= 1 and patience >= 0")


@dataclass
class OptState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParameterStore, tc: Optional[TrainConfig] = None) -> "OptState":
        tc = tc or TrainConfig()
        return cls(lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps,
                   m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: ParameterStore, grads: dict, opt: OptState) -> ParameterStore:
    """One bias-corrected Adam update.

    Parameter tensors are immutable, so each entry of ``params`` is replaced
    by a fresh leaf; the same dict is returned for convenience.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    opt.t += 1
    bc1 = 1.0 - opt.beta1 ** opt.t
    bc2 = 1.0 - opt.beta2 ** opt.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = opt.m.setdefault(name, np.zeros_like(p.data))
        v = opt.v.setdefault(name, np.zeros_like(p.data))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        update = opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        params[name] = Tensor(p.data - update, requires_grad=True)
    return params


def loss_and_grads(params: ParameterStore, cfg: ModelConfig, x, y, training: bool = False,
                   rng: Optional[np.random.Generator] = None) -> tuple[LossBreakdown, dict]:
    for p in params.values():
        p.zero_grad()
    out = model_forward(x, params, cfg, training=training, rng=rng)
    total, parts = total_loss(out.logits, y, out.shared, out.specific, cfg.lambda_sim, cfg.lambda_diff)
    if not np.isfinite(total.data):
        raise NumericalError("non-finite training loss")
    T.backward(total)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    return parts, grads


def _weighted_mean(parts: list[LossBreakdown], sizes: list[int]) -> LossBreakdown:
    w = np.asarray(sizes, dtype=np.float64) / sum(sizes)
    cols = np.array([[p.l_cls, p.l_sim, p.l_diff, p.l_total] for p in parts])
    return LossBreakdown(*map(float, w @ cols))


def train_epoch(params: ParameterStore, ds_train: Dataset, opt: OptState, cfg: ModelConfig,
                rng: np.random.Generator, batch_size: int = 32) -> LossBreakdown:
    """One pass over shuffled batches: forward, loss, backward, Adam. Updates ``params`` in place."""
    if len(ds_train) == 0:
        raise ConfigError("empty training set")
    parts, sizes = [], []
    for b, (x, y) in enumerate(batch_iter(ds_train, batch_size, shuffle=True, seed=rng)):
        try:
            lb, grads = loss_and_grads(params, cfg, x, y, training=True, rng=rng)
            adam_step(params, grads, opt)
        except NumericalError as exc:
            raise NumericalError(f"batch {b}: {exc}") from exc
        parts.append(lb)
        sizes.append(len(y))
    return _weighted_mean(parts, sizes)


def predict(params: ParameterStore, cfg: ModelConfig, ds: Dataset, batch_size: int = 256):
    """Logits and fused descriptors for every sample, dropout off."""
    logits, fused = [], []
    for x, _ in batch_iter(ds, batch_size, shuffle=False):
        out = model_forward(x, params, cfg, training=False)
        logits.append(out.logits.data)
        fused.append(out.fused.data)
    return np.concatenate(logits), np.concatenate(fused)


def evaluate(params: ParameterStore, cfg: ModelConfig, ds: Dataset,
             batch_size: int = 256) -> tuple[LossBreakdown, MetricsReport]:
    parts, sizes, preds = [], [], []
    for x, y in batch_iter(ds, batch_size, shuffle=False):
        out = model_forward(x, params, cfg, training=False)
        _, lb = total_loss(out.logits, y, out.shared, out.specific, cfg.lambda_sim, cfg.lambda_diff)
        parts.append(lb)
        sizes.append(len(y))
        preds.append(np.argmax(out.logits.data, axis=1))
    return _weighted_mean(parts, sizes), compute_metrics(np.concatenate(preds), ds.y, cfg.n_classes)


@dataclass
class EpochRecord:
    epoch: int
    train: LossBreakdown
    val: LossBreakdown
    val_metrics: MetricsReport
    seconds: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "train": self.train.to_dict(), "val": self.val.to_dict(),
                "val_metrics": self.val_metrics.to_dict(), "seconds": self.seconds}


@dataclass
class RunRecord:
    seed: int
    config: dict
    train_config: dict
    epochs: list = field(default_factory=list)
    best_epoch: int = 0

    def to_dict(self) -> dict:
        return {"seed": self.seed, "config": self.config, "train_config": self.train_config,
                "best_epoch": self.best_epoch, "epochs": [e.to_dict() for e in self.epochs]}


def _seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, train_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(train_ss)


def fit(cfg: ModelConfig, ds_train: Dataset, ds_val: Dataset, tc: Optional[TrainConfig] = None,
        seed: int = 0, params: Optional[ParameterStore] = None,
        on_epoch=None) -> tuple[ParameterStore, RunRecord]:
    """Train with early stopping on validation accuracy.

    Stops after ``patience`` epochs without strict improvement (``patience=0``
    runs a single epoch) or at ``max_epochs``; returns the best-epoch weights.
    """
    tc = tc or TrainConfig()
    init_rng, train_rng = _seed_streams(seed)
    if params is None:
        params = init_params(cfg, init_rng)
    opt = OptState.for_params(params, tc)
    record = RunRecord(seed=seed, config=cfg.to_dict(), train_config=asdict(tc))
    best_acc, best_params, wait = -np.inf, None, 0
    for epoch in range(1, tc.max_epochs + 1):
        start = time.perf_counter()
        try:
            train_lb = train_epoch(params, ds_train, opt, cfg, train_rng, tc.batch_size)
        except NumericalError as exc:
            raise NumericalError(f"epoch {epoch}: {exc}") from exc
        val_lb, val_m = evaluate(params, cfg, ds_val)
        record.epochs.append(EpochRecord(epoch, train_lb, val_lb, val_m, time.perf_counter() - start))
        log.info("epoch %d train %.4f val %.4f acc %.4f", epoch, train_lb.l_total,
                 val_lb.l_total, val_m.accuracy)
        if on_epoch is not None:
            on_epoch(record.epochs[-1])
        if val_m.accuracy > best_acc:
            best_acc, wait = val_m.accuracy, 0
            best_params = {k: Tensor(p.data, requires_grad=True) for k, p in params.items()}
            record.best_epoch = epoch
        else:
            wait += 1
        if wait >= tc.patience:
            break
    return best_params, record


VARIANTS = ("full", "no_causal", "no_se", "mlp_head", "baseline")

_VARIANT_FLAGS = {
    "full": {},
    "no_causal": {"causal": False},
    "no_se": {"se": False},
    "mlp_head": {"mlp_head_only": True},
    "baseline": {"use_encoder": False, "mlp_head_only": True, "n_scales": 1},
}


def build_variant(name: str, cfg: ModelConfig) -> ModelConfig:
    """Ablation variant of ``cfg``: only the flags tied to ``name`` change."""
    if name not in _VARIANT_FLAGS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return replace(copy.deepcopy(cfg), **_VARIANT_FLAGS[name])


def gradient_report(params: ParameterStore, cfg: ModelConfig, x, y,
                    eps: float = 1e-5) -> dict[str, float]:
    """Max relative finite-difference error of the total loss, per parameter tensor."""
    frozen = {k: Tensor(p.data) for k, p in params.items()}
    report = {}
    for name in params:
        def f(t, name=name):
            local = dict(frozen)
            local[name] = t
            out = model_forward(x, local, cfg, training=False)
            return total_loss(out.logits, y, out.shared, out.specific,
                              cfg.lambda_sim, cfg.lambda_diff)[0]
        report[name] = T.finite_diff_check(f, params[name].data, eps=eps)
    return report
