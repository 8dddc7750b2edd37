"""Checkpoints as one flat float32 parameter file plus a JSON descriptor."""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def save_checkpoint(state: dict, path, config: dict | None = None) -> Path:
    """Write ``state`` (name -> tensor) to ``path`` (``.bin``) and ``path.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype), "offset": offset})
        flat = arr.astype(np.float32).ravel()
        chunks.append(flat)
        offset += flat.size
    data = np.concatenate(chunks) if chunks else np.zeros(0, np.float32)
    path.write_bytes(data.tobytes())
    descriptor = {"format": "flat-float32", "entries": entries, "config_hash": config_hash(config or {})}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(descriptor, indent=1))
    return path


def read_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    descriptor = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype=np.float32)
    state = {}
    for e in descriptor["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = data[e["offset"] : e["offset"] + n].reshape(e["shape"]).astype(e["dtype"])
        state[e["name"]] = torch.from_numpy(arr.copy())
    return state, descriptor


def load_checkpoint(module: torch.nn.Module, path) -> dict:
    """Copy every stored parameter whose name and shape match into ``module``.

    Names present on only one side are reported, not fatal, so older
    checkpoints still load into extended models.
    """
    state, descriptor = read_checkpoint(path)
    own = module.state_dict()
    loaded, skipped = [], []
    for name, tensor in state.items():
        if name in own and own[name].shape == tensor.shape:
            own[name] = tensor.to(own[name].dtype)
            loaded.append(name)
        else:
            skipped.append(name)
    module.load_state_dict(own)
    missing = sorted(set(own) - set(loaded))
    if skipped or missing:
        logger.warning("checkpoint %s: skipped %s, not found %s", path, skipped, missing)
    return {"loaded": loaded, "skipped": skipped, "missing": missing, "config_hash": descriptor["config_hash"]}
