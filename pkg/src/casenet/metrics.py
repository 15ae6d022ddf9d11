"""Accuracy, macro-F1 and multiclass MCC from a confusion matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    mcc: float
    confusion: np.ndarray  # rows: true class, cols: predicted class

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1, "mcc": self.mcc,
                "confusion": self.confusion.tolist()}


def confusion_matrix(pred, labels, K: int) -> np.ndarray:
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    return cm


def compute_metrics(pred, labels, K: int) -> MetricsReport:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.size == 0:
        raise ContractError("compute_metrics: empty input")
    if pred.shape != labels.shape:
        raise ContractError(f"pred {pred.shape} vs labels {labels.shape}")
    for name, arr in (("pred", pred), ("labels", labels)):
        if arr.min() < 0 or arr.max() >= K:
            raise ContractError(f"{name} entries must lie in [0, {K})")

    cm = confusion_matrix(pred, labels, K)
    n = cm.sum()
    tp = np.diag(cm).astype(np.float64)
    t_k = cm.sum(axis=1).astype(np.float64)  # true counts
    p_k = cm.sum(axis=0).astype(np.float64)  # predicted counts

    accuracy = float(tp.sum() / n)

    # per-class F1 = 2TP / (predicted + true); undefined classes score 0
    denom = p_k + t_k
    f1 = np.divide(2.0 * tp, denom, out=np.zeros(K), where=denom > 0)
    macro_f1 = float(f1.mean())

    c, s = tp.sum(), float(n)
    cov_xy = c * s - p_k @ t_k
    cov_xx = s * s - p_k @ p_k
    cov_yy = s * s - t_k @ t_k
    d = cov_xx * cov_yy
    mcc = float(cov_xy / np.sqrt(d)) if d > 0 else 0.0
    return MetricsReport(accuracy, macro_f1, mcc, cm)
