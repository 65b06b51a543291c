"""Checkpoint archives: flat named tensors plus one JSON metadata record.

Files are safetensors archives written to a temporary sibling and renamed
into place, so an interrupted save never clobbers the previous checkpoint.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save as st_save

META_KEY = "arbsr"


def code_version() -> str:
    """Short hash over this package's source files."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for f in sorted(root.rglob("*.py")):
        h.update(f.relative_to(root).as_posix().encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def atomic_write_bytes(path, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def save_checkpoint(path, tensors: dict[str, torch.Tensor], metadata: dict) -> Path:
    clean = {k: v.detach().cpu().contiguous().clone() for k, v in tensors.items()}
    meta = {META_KEY: json.dumps(metadata, sort_keys=True)}
    return atomic_write_bytes(path, st_save(clean, metadata=meta))


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    tensors = {}
    with safe_open(str(path), framework="pt") as f:
        raw_meta = f.metadata() or {}
        for k in f.keys():
            tensors[k] = f.get_tensor(k)
    meta = json.loads(raw_meta[META_KEY]) if META_KEY in raw_meta else {}
    return tensors, meta


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def split_prefix(tensors: dict[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
