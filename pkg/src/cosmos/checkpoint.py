"""Checkpoint archives and reproducibility helpers shared by both trainers."""

from __future__ import annotations

import hashlib
import io
import os
import random
from pathlib import Path

import numpy as np
import torch

FORMAT = "cosmos-checkpoint/1"


def seed_everything(seed: int, deterministic: bool = False) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def save_checkpoint(path, kind: str, config: dict, weights: dict, optimizer: dict | None = None,
                    epoch: int | None = None, extra: dict | None = None) -> Path:
    """Write a self-describing archive: topology/config, named state dicts,
    optimizer state and epoch counter. Written atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format": FORMAT, "kind": kind, "config": config,
               "weights": {k: {n: t.detach().cpu().clone() for n, t in v.items()} for k, v in weights.items()},
               "optimizer": optimizer or {}, "epoch": epoch, "extra": extra or {}}
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} archive")
    return payload


def state_checksum(state: dict) -> str:
    """SHA-256 over the named tensors of a state dict (order-independent)."""
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name]
        h.update(name.encode())
        buf = io.BytesIO()
        np.save(buf, t.detach().cpu().numpy(), allow_pickle=False)
        h.update(buf.getvalue())
    return h.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    return state_checksum(module.state_dict())


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
