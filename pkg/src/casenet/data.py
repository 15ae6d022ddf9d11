"""Synthetic generators, the on-disk dataset format, normalization, splits, batching.

On-disk layout: a directory holding ``manifest.json`` (name, n_channels,
length, n_classes, samples=[{path, label}]) and one header-less CSV per
sample with N rows of L comma-separated values.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import (ContractError, DatasetError, LabelRangeError, MissingFileError,
                     NonFiniteValueError, ShapeMismatchError)


@dataclass
class MtsSample:
    x: np.ndarray
    label: int


@dataclass
class Dataset:
    """Labelled windows stored densely as ``x[n, N, L]`` and ``y[n]``."""

    x: np.ndarray
    y: np.ndarray
    n_classes: int
    name: str = "dataset"
    channel_stats: Optional[tuple] = None  # (mean[N], std[N])
    indices: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 3 or self.y.shape != (self.x.shape[0],):
            raise ShapeMismatchError(f"x {self.x.shape} / y {self.y.shape} malformed")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            bad = int(np.argmax((self.y < 0) | (self.y >= self.n_classes)))
            raise LabelRangeError(f"sample {bad}: label {self.y[bad]} outside [0, {self.n_classes})")
        if self.indices is None:
            self.indices = np.arange(len(self.y))

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_channels(self) -> int:
        return self.x.shape[1]

    @property
    def length(self) -> int:
        return self.x.shape[2]

    @property
    def samples(self) -> list[MtsSample]:
        return [MtsSample(self.x[i].copy(), int(self.y[i])) for i in range(len(self))]

    def class_counts(self) -> list[int]:
        return np.bincount(self.y, minlength=self.n_classes).tolist()

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, x=self.x[idx].copy(), y=self.y[idx].copy(),
                       indices=self.indices[idx].copy())


# ---------------------------------------------------------------- generators

def gen_causal_probe(n: int, N: int = 3, L: int = 64, seed: int = 0,
                     prefix_noise: float = 0.0, tail_std: float = 3.0) -> Dataset:
    """Two classes that differ only in the first half of the window.

    Class c carries a unit sinusoid with 2 or 4 cycles over the prefix
    ``[0, L/2)`` (random phase per channel); the tail ``[L/2, L)`` is
    label-independent Gaussian noise of std ``tail_std``.
    """
    if n < 2:
        raise ContractError("gen_causal_probe needs n >= 2")
    rng = np.random.default_rng(seed)
    half = L // 2
    y = np.arange(n) % 2
    t = np.arange(half) / half
    freq = np.array([2.0, 4.0])[y]
    phase = rng.uniform(0.0, 2 * np.pi, size=(n, N))
    x = np.empty((n, N, L))
    x[:, :, :half] = np.sin(2 * np.pi * freq[:, None, None] * t[None, None, :] + phase[:, :, None])
    if prefix_noise > 0:
        x[:, :, :half] += rng.normal(0.0, prefix_noise, size=(n, N, half))
    x[:, :, half:] = rng.normal(0.0, tail_std, size=(n, N, L - half))
    return Dataset(x, y, 2, name="causal-probe")


REGIMES = ((0.9, 0.00, 0.5), (0.5, 0.05, 1.0), (0.2, -0.05, 2.0))


def gen_regime_switch(n: int, N: int = 5, L: int = 128, K: int = 3, seed: int = 0) -> Dataset:
    """AR(1) windows with class-specific (coefficient, drift, volatility).

    Each sample has one uniformly drawn switch point after which the
    volatility doubles; channels are independent paths sharing the class
    parameters. Labels are assigned round-robin.
    """
    if not 1 <= K <= len(REGIMES):
        raise ContractError(f"K must be in [1, {len(REGIMES)}]")
    if n < K:
        raise ContractError(f"gen_regime_switch needs n >= K ({K})")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % K
    coef, drift, vol = (np.array(col)[y] for col in zip(*REGIMES[:K]))
    switch = rng.integers(1, L, size=n)
    eps = rng.normal(size=(n, N, L))
    sigma = vol[:, None] * np.where(np.arange(L)[None, :] >= switch[:, None], 2.0, 1.0)
    x = np.empty((n, N, L))
    prev = np.zeros((n, N))
    for t in range(L):
        prev = coef[:, None] * prev + drift[:, None] + sigma[:, t, None] * eps[:, :, t]
        x[:, :, t] = prev
    return Dataset(x, y, K, name="regime-switch")


GENERATORS = {"causal-probe": gen_causal_probe, "regime-switch": gen_regime_switch}


# ---------------------------------------------------------------- persistence

def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(len(ds))))
    entries = []
    for i in range(len(ds)):
        rel = f"sample_{i:0{width}d}.csv"
        rows = "\n".join(",".join(f"{v:.17g}" for v in row) for row in ds.x[i])
        _atomic_write_text(d / rel, rows + "\n")
        entries.append({"path": rel, "label": int(ds.y[i])})
    manifest = {"name": ds.name, "n_channels": ds.n_channels, "length": ds.length,
                "n_classes": ds.n_classes, "samples": entries}
    _atomic_write_text(d / "manifest.json", json.dumps(manifest, indent=1) + "\n")
    return d


def load_dataset(path) -> Dataset:
    """Load from a dataset directory or its ``manifest.json``."""
    p = Path(path)
    manifest_path = p / "manifest.json" if p.is_dir() else p
    if not manifest_path.exists():
        raise MissingFileError(f"manifest not found: {manifest_path}")
    try:
        meta = json.loads(manifest_path.read_text(encoding="utf-8"))
        N, L, K = int(meta["n_channels"]), int(meta["length"]), int(meta["n_classes"])
        entries = meta["samples"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed manifest {manifest_path}: {exc}") from exc
    root = manifest_path.parent
    x = np.empty((len(entries), N, L))
    y = np.empty(len(entries), dtype=np.int64)
    for i, entry in enumerate(entries):
        f = root / entry["path"]
        label = int(entry["label"])
        if not 0 <= label < K:
            raise LabelRangeError(f"sample {i} ({entry['path']}): label {label} outside [0, {K})")
        if not f.exists():
            raise MissingFileError(f"sample {i}: file not found: {f}")
        lines = [ln for ln in f.read_text(encoding="utf-8").split("\n") if ln.strip()]
        if len(lines) != N:
            raise ShapeMismatchError(f"sample {i} ({entry['path']}): {len(lines)} rows, expected {N}")
        for r, line in enumerate(lines):
            cells = line.split(",")
            if len(cells) != L:
                raise ShapeMismatchError(f"sample {i} ({entry['path']}) row {r}: "
                                         f"{len(cells)} columns, expected {L}")
            try:
                x[i, r] = [float(c) for c in cells]
            except ValueError as exc:
                raise DatasetError(f"sample {i} ({entry['path']}) row {r}: {exc}") from exc
        if not np.isfinite(x[i]).all():
            raise NonFiniteValueError(f"sample {i} ({entry['path']}): non-finite value")
        y[i] = label
    return Dataset(x, y, K, name=str(meta.get("name", root.name)))


# ---------------------------------------------------------------- preprocessing

def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    mean = ds.x.mean(axis=(0, 2))
    std = ds.x.std(axis=(0, 2))
    bad = np.flatnonzero(std <= 1e-8)
    if bad.size:
        raise DatasetError(f"zero-variance channel(s): {bad.tolist()}")
    return mean, std


def zscore_normalize(ds: Dataset, stats: Optional[tuple] = None) -> tuple[Dataset, tuple]:
    """Standardize each channel; stats default to those of ``ds`` itself."""
    if stats is None:
        stats = channel_stats(ds)
    mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    if mean.shape != (ds.n_channels,) or std.shape != (ds.n_channels,):
        raise ShapeMismatchError("channel stats do not match dataset channel count")
    x = (ds.x - mean[None, :, None]) / std[None, :, None]
    return replace(ds, x=x, channel_stats=(mean, std)), (mean, std)


def split(ds: Dataset, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified train/val/test split; each class is shuffled then cut by rounding."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise ContractError(f"fractions must be 3 non-negative values summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    needed = int((fr > 0).sum())
    parts = [[], [], []]
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.y == c)
        if idx.size == 0:
            continue
        if idx.size < needed:
            raise ContractError(f"class {c} has {idx.size} samples, fewer than {needed} splits")
        idx = rng.permutation(idx)
        n_tr = int(round(fr[0] * idx.size))
        n_va = int(round(fr[1] * idx.size))
        if fr[2] == 0:
            n_va = idx.size - n_tr
        n_va = min(n_va, idx.size - n_tr)
        parts[0].append(idx[:n_tr])
        parts[1].append(idx[n_tr:n_tr + n_va])
        parts[2].append(idx[n_tr + n_va:])
    return tuple(ds.subset(np.sort(np.concatenate(p)) if p else np.array([], dtype=np.int64))
                 for p in parts)


def batch_iter(ds: Dataset, batch_size: int, shuffle: bool = True,
               seed=None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(x[B, N, L], y[B])``; every sample appears once, last batch may be short.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = np.arange(len(ds))
    if shuffle:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        order = rng.permutation(order)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield ds.x[idx], ds.y[idx]


def split_fingerprint(*parts: Dataset) -> str:
    """Short hash of the original indices in each split."""
    h = hashlib.sha256()
    for p in parts:
        h.update(np.asarray(p.indices, dtype=np.int64).tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]
