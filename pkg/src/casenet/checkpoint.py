"""Checkpoint directories: ``manifest.json`` plus one raw ``<f8`` file per parameter."""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DatasetError, MissingFileError
from .layers import ModelConfig, ParameterStore
from .tensor import Tensor

FORMAT = "casenet-ckpt-1"


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_checkpoint(path, params: ParameterStore, cfg: ModelConfig,
                    channel_stats: Optional[tuple] = None, extra: Optional[dict] = None) -> Path:
    """Write to a sibling temp directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    entries = []
    for i, (name, p) in enumerate(params.items()):
        fname = f"{i:03d}_{name}.bin"
        (tmp / fname).write_bytes(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        entries.append({"name": name, "shape": list(p.shape), "file": fname})
    manifest = {"format": FORMAT, "config": cfg.to_dict(), "params": entries, "extra": extra or {}}
    if channel_stats is not None:
        manifest["channel_stats"] = {"mean": [float(v) for v in channel_stats[0]],
                                     "std": [float(v) for v in channel_stats[1]]}
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[ParameterStore, ModelConfig, Optional[tuple], dict]:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise MissingFileError(f"checkpoint manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise DatasetError(f"unrecognized checkpoint format in {mpath}")
    cfg = ModelConfig.from_dict(manifest["config"])
    params: ParameterStore = {}
    for e in manifest["params"]:
        raw = (path / e["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype="<f8")
        if arr.size != int(np.prod(e["shape"])):
            raise DatasetError(f"checkpoint parameter {e['name']}: {arr.size} values, "
                               f"expected shape {e['shape']}")
        params[e["name"]] = Tensor(arr.reshape(e["shape"]).astype(np.float64), requires_grad=True)
    stats = None
    if "channel_stats" in manifest:
        cs = manifest["channel_stats"]
        stats = (np.asarray(cs["mean"]), np.asarray(cs["std"]))
    return params, cfg, stats, manifest.get("extra", {})
