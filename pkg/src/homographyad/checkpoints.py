"""Checkpoint container: a torch weights blob plus a JSON sidecar.

``<name>.pt`` holds the state dict; ``<name>.json`` records the payload kind,
backbone id, config hash and the SHA-256 of the blob so a mismatched or
corrupted pair is detected at load time.
"""
from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import torch

from .errors import ConfigMismatch


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".pt", ".json"):
        path = path.with_suffix("")
    return path.with_suffix(".pt"), path.with_suffix(".json")


def save_container(path, state: dict, meta: dict) -> Path:
    blob_path, side_path = _paths(path)
    blob_path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(state, buf)
    data = buf.getvalue()
    blob_path.write_bytes(data)
    sidecar = dict(meta)
    sidecar["content_hash"] = hashlib.sha256(data).hexdigest()
    if "config" in meta and "config_hash" not in meta:
        sidecar["config_hash"] = config_hash(meta["config"])
    side_path.write_text(json.dumps(sidecar, indent=1, sort_keys=True, default=str) + "\n")
    return blob_path


def load_container(path, expect_config_hash: str | None = None):
    """Returns ``(state_dict, sidecar)``; raises ``ConfigMismatch`` on hash mismatch."""
    blob_path, side_path = _paths(path)
    meta = json.loads(side_path.read_text())
    data = blob_path.read_bytes()
    digest = hashlib.sha256(data).hexdigest()
    if digest != meta.get("content_hash"):
        raise ConfigMismatch(f"{blob_path}: content hash {digest[:12]} does not match sidecar")
    if expect_config_hash is not None and meta.get("config_hash") != expect_config_hash:
        raise ConfigMismatch(f"{blob_path}: config hash {meta.get('config_hash')} != expected {expect_config_hash}")
    state = torch.load(io.BytesIO(data), map_location="cpu", weights_only=False)
    return state, meta
