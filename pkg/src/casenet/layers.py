"""CASE-NET blocks: multi-scale projection, the weight-shared causal encoder,
channel recalibration, the shared/specific gate, and the fusion head.

Activations are laid out channel-first, ``[B, D, L]``. Parameters live in a
flat ``dict[str, Tensor]`` (a :data:`ParameterStore`); the encoder entries are
created once and reused by every scale branch.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

ParameterStore = dict  # name -> Tensor leaf with requires_grad=True


@dataclass
class ModelConfig:
    n_channels: int
    length: int
    n_classes: int
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

    def __post_init__(self):
        for name in ("n_channels", "length", "n_classes", "n_scales", "hidden_dim",
                     "n_heads", "se_ratio", "encoder_layers", "conv_kernel"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.hidden_dim % self.n_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.hidden_dim % self.se_ratio:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by se_ratio {self.se_ratio}")
        if self.lambda_sim < 0 or self.lambda_diff < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if 2 ** (self.n_scales - 1) > self.length:
            raise ConfigError(f"scale too deep for sequence length: S={self.n_scales}, L={self.length}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    def scale_lengths(self) -> list[int]:
        return [math.ceil(self.length / 2 ** s) for s in range(self.n_scales)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DisentangledPair:
    shared: Tensor
    specific: Tensor
    gate: Tensor


@dataclass
class ForwardOutput:
    logits: Tensor
    shared: list = field(default_factory=list)
    specific: list = field(default_factory=list)
    recalibrated: list = field(default_factory=list)
    saliency: list = field(default_factory=list)
    fused: Optional[Tensor] = None


# ---------------------------------------------------------------- parameters

def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def projection_kernel(scale_index: int) -> int:
    """Kernel width for 0-based branch ``scale_index``."""
    return 3 + 2 * scale_index


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ParameterStore:
    D, N, k = cfg.hidden_dim, cfg.n_channels, cfg.conv_kernel
    p: ParameterStore = {}
    n_proj = cfg.n_scales if cfg.use_encoder else 1
    for s in range(n_proj):
        ks = projection_kernel(s)
        p[f"proj.{s}.w"] = _glorot(rng, (D, N, ks), N * ks, D * ks)
        p[f"proj.{s}.b"] = _zeros(D)
    if cfg.use_encoder:
        for layer in range(cfg.encoder_layers):
            pre = f"enc.{layer}"
            p[f"{pre}.conv.w"] = _glorot(rng, (D, D, k), D * k, D * k)
            p[f"{pre}.conv.b"] = _zeros(D)
            p[f"{pre}.ln1.g"] = _ones(D)
            p[f"{pre}.ln1.b"] = _zeros(D)
            for name in ("wq", "wk", "wv", "wo"):
                p[f"{pre}.attn.{name}"] = _glorot(rng, (D, D), D, D)
            p[f"{pre}.ln2.g"] = _ones(D)
            p[f"{pre}.ln2.b"] = _zeros(D)
        if cfg.se:
            hid = D // cfg.se_ratio
            p["se.w1"] = _glorot(rng, (hid, D), D, hid)
            p["se.w2"] = _glorot(rng, (D, hid), hid, D)
    fuse_in = D
    if not cfg.mlp_head_only:
        p["gate.w"] = _glorot(rng, (D, D), D, D)
        p["gate.b"] = _zeros(D)
        fuse_in = 2 * D
    p["head.w1"] = _glorot(rng, (D, fuse_in), fuse_in, D)
    p["head.b1"] = _zeros(D)
    p["head.w2"] = _glorot(rng, (cfg.n_classes, D), D, cfg.n_classes)
    p["head.b2"] = _zeros(cfg.n_classes)
    return p


def encoder_param_names(params: ParameterStore) -> list[str]:
    return [n for n in params if n.startswith(("enc.", "se."))]


# ---------------------------------------------------------------- stage 1: projection

def multi_scale_project(X: Tensor, cfg: ModelConfig, params: ParameterStore) -> list[Tensor]:
    """Project ``[B, N, L]`` into S views ``[B, D, ceil(L / 2**s)]``.

    Branch ``s`` (0-based) uses kernel ``3 + 2s`` and stride ``2**s`` with
    ``k - 1`` zeros on the left, which yields exactly ``ceil(L / stride)``
    outputs for any stride.
    """
    if X.ndim != 3 or X.shape[1] != cfg.n_channels or X.shape[2] != cfg.length:
        raise ConfigError(f"input shape {X.shape} does not match config "
                          f"(N={cfg.n_channels}, L={cfg.length})")
    n_views = cfg.n_scales if cfg.use_encoder else 1
    views = []
    for s in range(n_views):
        ks, stride = projection_kernel(s), 2 ** s
        if math.ceil(cfg.length / stride) < 1:
            raise ConfigError("scale too deep for sequence length")
        xp = T.pad_time(X, ks - 1)
        views.append(T.relu(T.conv1d(xp, params[f"proj.{s}.w"], params[f"proj.{s}.b"], stride=stride)))
    return views


# ---------------------------------------------------------------- stage 2: encoder

def build_causal_mask(L: int) -> Tensor:
    """``[L, L]`` additive mask: 0 where ``i >= j``, the -inf sentinel above the diagonal."""
    return Tensor(np.triu(np.full((L, L), T.MASK_VALUE), k=1) + 0.0)


def causal_conv1d(x: Tensor, w: Tensor, b: Tensor, k: int, d: int, causal: bool = True) -> Tensor:
    """Length-preserving dilated conv.

    Causal mode puts all ``(k-1)*d`` zeros on the left. Otherwise the padding
    is split, with the left side taking the odd one.
    """
    pad = (k - 1) * d
    left = pad if causal else pad - pad // 2
    return T.conv1d(T.pad_time(x, left, pad - left), w, b, stride=1, dilation=d)


def attention_probs(q: Tensor, k: Tensor, mask: Tensor) -> Tensor:
    """Per-head attention weights from ``[..., L, d_k]`` queries and keys."""
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    return T.masked_softmax(scores, mask)


def masked_attention(H: Tensor, params: ParameterStore, layer: int, cfg: ModelConfig,
                     return_probs: bool = False):
    """Multi-head self-attention over time; projections mix channels per timestep."""
    B, D, L = H.shape
    nh, dk = cfg.n_heads, cfg.head_dim
    pre = f"enc.{layer}.attn"

    def heads(w):
        # [D, D] @ [B, D, L] -> [B, h, L, d_k]
        y = T.reshape(T.matmul(params[f"{pre}.{w}"], H), (B, nh, dk, L))
        return T.transpose(y, (0, 1, 3, 2))

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    mask = build_causal_mask(L) if cfg.causal else Tensor(np.zeros((L, L)))
    probs = attention_probs(q, k, mask)
    ctx = T.transpose(T.matmul(probs, v), (0, 1, 3, 2))
    out = T.matmul(params[f"{pre}.wo"], T.reshape(ctx, (B, D, L)))
    return (out, probs) if return_probs else out


def encoder_block(H: Tensor, params: ParameterStore, layer: int, cfg: ModelConfig,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    pre = f"enc.{layer}"
    conv = causal_conv1d(H, params[f"{pre}.conv.w"], params[f"{pre}.conv.b"],
                         cfg.conv_kernel, 2 ** layer, causal=cfg.causal)
    H = T.layer_norm(T.add(H, T.relu(conv)), params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
    att = T.dropout(masked_attention(H, params, layer, cfg), cfg.dropout_p, rng)
    return T.layer_norm(T.add(H, att), params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])


def encoder_stack(view: Tensor, params: ParameterStore, cfg: ModelConfig,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """The block stack for one scale, before recalibration."""
    H = view
    for layer in range(cfg.encoder_layers):
        H = encoder_block(H, params, layer, cfg, rng)
    return H


def se_recalibrate(H: Tensor, params: ParameterStore, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Squeeze over time, bottleneck excite, rescale channels.

    Returns ``(H_tilde, a)`` with ``a`` of shape ``[B, D]``. With ``cfg.se``
    off, ``a`` is all ones and ``H`` passes through unchanged.
    """
    B, D, _ = H.shape
    if not cfg.se:
        return H, Tensor(np.ones((B, D)))
    z = T.reduce_mean(H, axis=2)                                   # [B, D]
    hidden = T.relu(T.matmul(z, T.swap_last(params["se.w1"])))     # [B, D/r]
    a = T.sigmoid(T.matmul(hidden, T.swap_last(params["se.w2"])))  # [B, D]
    return T.mul(T.reshape(a, (B, D, 1)), H), a


def encoder_forward(views: list[Tensor], params: ParameterStore, cfg: ModelConfig,
                    rng: Optional[np.random.Generator] = None,
                    return_pre_se: bool = False):
    """Apply the one shared encoder to every view. Returns ``[(H_tilde, a), ...]``."""
    pre_se = [encoder_stack(v, params, cfg, rng) for v in views]
    if return_pre_se:
        return pre_se
    return [se_recalibrate(H, params, cfg) for H in pre_se]


# ---------------------------------------------------------------- stage 3: decomposition + head

def disentangle(H_tilde: Tensor, params: ParameterStore) -> DisentangledPair:
    D = H_tilde.shape[1]
    logits = T.add(T.matmul(params["gate.w"], H_tilde), T.reshape(params["gate.b"], (1, D, 1)))
    m = T.sigmoid(logits)
    shared = T.mul(m, H_tilde)
    specific = T.mul(T.sub(1.0, m), H_tilde)
    return DisentangledPair(shared, specific, m)


def _pool(reps: list[Tensor]) -> Tensor:
    """Mean over time, then mean over scales: list of ``[B, D, L_s]`` -> ``[B, D]``."""
    pooled = [T.reduce_mean(r, axis=2) for r in reps]
    acc = pooled[0]
    for p in pooled[1:]:
        acc = T.add(acc, p)
    return T.scale(acc, 1.0 / len(pooled))


def mlp_head(G: Tensor, params: ParameterStore) -> Tensor:
    h = T.relu(T.add(T.matmul(G, T.swap_last(params["head.w1"])), T.reshape(params["head.b1"], (1, -1))))
    return T.add(T.matmul(h, T.swap_last(params["head.w2"])), T.reshape(params["head.b2"], (1, -1)))


def fused_descriptor(pairs: list[DisentangledPair]) -> Tensor:
    """``[pooled shared ; pooled specific]``, shape ``[B, 2D]``."""
    return T.concat([_pool([p.shared for p in pairs]), _pool([p.specific for p in pairs])], axis=1)


def fuse_and_classify(pairs: list[DisentangledPair], params: ParameterStore,
                      cfg: ModelConfig) -> Tensor:
    return mlp_head(fused_descriptor(pairs), params)


# ---------------------------------------------------------------- full model

def model_forward(X, params: ParameterStore, cfg: ModelConfig, training: bool = False,
                  rng: Optional[np.random.Generator] = None) -> ForwardOutput:
    """Logits plus the per-scale intermediates the auxiliary losses need.

    Dropout is active only when ``training`` and an ``rng`` are both given.
    """
    X = T.as_tensor(X)
    drop_rng = rng if training else None
    views = multi_scale_project(X, cfg, params)
    if not cfg.use_encoder:
        G = _pool(views)
        return ForwardOutput(logits=mlp_head(G, params), recalibrated=views, fused=G)
    encoded = encoder_forward(views, params, cfg, drop_rng)
    recal = [h for h, _ in encoded]
    saliency = [a for _, a in encoded]
    if cfg.mlp_head_only:
        G = _pool(recal)
        return ForwardOutput(logits=mlp_head(G, params), recalibrated=recal,
                             saliency=saliency, fused=G)
    pairs = [disentangle(h, params) for h in recal]
    G = fused_descriptor(pairs)
    return ForwardOutput(logits=mlp_head(G, params),
                         shared=[p.shared for p in pairs],
                         specific=[p.specific for p in pairs],
                         recalibrated=recal, saliency=saliency, fused=G)
