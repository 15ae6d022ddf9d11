"""Training objective: classification NLL plus cross-scale consistency and
shared/specific orthogonality penalties."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

COS_EPS = 1e-8


@dataclass
class LossBreakdown:
    l_cls: float
    l_sim: float
    l_diff: float
    l_total: float

    def to_dict(self) -> dict:
        return asdict(self)


def nll_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ContractError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.min() < 0 or labels.max() >= K:
        raise ContractError(f"labels must lie in [0, {K}), got range "
                            f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros((B, K))
    onehot[np.arange(B), labels] = 1.0
    picked = T.reduce_sum(T.mul(T.log_softmax(logits, axis=1), onehot))
    return T.scale(picked, -1.0 / B)


def _time_pool(reps: Sequence[Tensor]) -> list[Tensor]:
    return [T.reduce_mean(r, axis=2) if r.ndim == 3 else r for r in reps]


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of ``[B, D]`` matrices."""
    dot = T.reduce_sum(T.mul(a, b), axis=1)
    na = T.sqrt(T.reduce_sum(T.mul(a, a), axis=1))
    nb = T.sqrt(T.reduce_sum(T.mul(b, b), axis=1))
    return T.div(dot, T.clamp_min(T.mul(na, nb), COS_EPS))


def sim_loss(shared: Sequence[Tensor]) -> Tensor:
    """Mean ``1 - cos`` over unordered scale pairs and batch, on time-pooled reps.

    Accepts ``[B, D, L_s]`` per scale (pooled over time here) or already pooled
    ``[B, D]``. Zero when there is a single scale.
    """
    pooled = _time_pool(shared)
    if len(pooled) < 2:
        return Tensor(0.0)
    terms = []
    for i in range(len(pooled)):
        for j in range(i + 1, len(pooled)):
            terms.append(T.reduce_mean(T.sub(1.0, _cosine(pooled[i], pooled[j]))))
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return T.scale(acc, 1.0 / len(terms))


def diff_loss(shared: Sequence[Tensor], specific: Sequence[Tensor]) -> Tensor:
    """``sum_s ||Z_sh^T Z_sp||_F^2 / (B^2 S)`` over time-pooled ``[B, D]`` matrices."""
    if len(shared) != len(specific):
        raise ContractError("shared and specific lists differ in length")
    sh, sp = _time_pool(shared), _time_pool(specific)
    S, B = len(sh), sh[0].shape[0]
    acc = None
    for a, b in zip(sh, sp):
        if a.shape != b.shape:
            raise ContractError(f"shared {a.shape} vs specific {b.shape}")
        cross = T.matmul(T.swap_last(a), b)
        term = T.reduce_sum(T.mul(cross, cross))
        acc = term if acc is None else T.add(acc, term)
    return T.scale(acc, 1.0 / (B * B * S))


def total_loss(logits: Tensor, labels, shared, specific, lambda_sim: float,
               lambda_diff: float) -> tuple[Tensor, LossBreakdown]:
    """Weighted objective as a differentiable scalar and its breakdown.

    Empty ``shared``/``specific`` (heads without a disentangle stage) make
    both auxiliary terms zero.
    """
    if lambda_sim < 0 or lambda_diff < 0:
        raise ContractError("loss weights must be non-negative")
    cls = nll_loss(logits, labels)
    if shared:
        sim = sim_loss(shared)
        dif = diff_loss(shared, specific)
    else:
        sim = dif = Tensor(0.0)
    total = T.add(cls, T.add(T.scale(sim, lambda_sim), T.scale(dif, lambda_diff)))
    parts = LossBreakdown(cls.item(), sim.item(), dif.item(), total.item())
    return total, parts
