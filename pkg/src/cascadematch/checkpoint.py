"""Checkpoint storage: named little-endian float32 arrays + JSON manifest.

A checkpoint is a directory holding ``arrays.npz`` (one named array per
state-dict entry) and ``manifest.json`` (model configuration, package
version, and an index of array shapes).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import __version__


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, module: nn.Module, manifest: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, tensor in module.state_dict().items():
        if not tensor.is_floating_point():
            raise CheckpointError(f"non-float state entry {name!r}")
        arrays[name] = tensor.detach().cpu().numpy().astype("<f4")
    np.savez(path / "arrays.npz", **arrays)
    meta = dict(manifest or {})
    meta["format_version"] = 1
    meta["package_version"] = __version__
    meta["arrays"] = {k: list(v.shape) for k, v in sorted(arrays.items())}
    (path / "manifest.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    npz, meta = path / "arrays.npz", path / "manifest.json"
    if not npz.exists() or not meta.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    manifest = json.loads(meta.read_text())
    with np.load(npz) as archive:
        state = {k: torch.from_numpy(archive[k].astype(np.float32))
                 for k in archive.files}
    return state, manifest


def load_into(path, module: nn.Module) -> dict:
    state, manifest = load_checkpoint(path)
    module.load_state_dict(state)
    return manifest
