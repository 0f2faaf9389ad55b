"""Versioned checkpoint container.

A checkpoint is a directory holding ``manifest.json`` (format version, model
kind, config, tensor index) and ``weights.npz`` with the tensors keyed by
canonical state-dict names. Both files are readable without executing code.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]


def save_checkpoint(path: str | Path, kind: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {k: np.ascontiguousarray(v) for k, v in tensors.items()}
    np.savez(path / "weights.npz", **arrays)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "tensors": {
            k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in sorted(arrays.items())
        },
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"{path}: not a checkpoint (missing manifest.json)")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
    with np.load(path / "weights.npz") as npz:
        tensors = {k: npz[k].copy() for k in npz.files}
    index = manifest.get("tensors", {})
    if set(index) != set(tensors):
        raise CheckpointError(f"{path}: manifest tensor index does not match weights.npz")
    return Checkpoint(kind=manifest["kind"], config=manifest["config"], tensors=tensors)


def checkpoint_hash(path: str | Path) -> str:
    """Content hash over manifest and weights, for the service health endpoint."""
    path = Path(path)
    h = hashlib.sha256()
    for name in ("manifest.json", "weights.npz"):
        h.update((path / name).read_bytes())
    return h.hexdigest()
