"""Checkpoint files: a flat name -> tensor map plus a JSON manifest.

Stored as safetensors; the header metadata carries a format tag, version,
phase, config snapshot and per-tensor manifest (shape, dtype, trainable
flag, module tag). Metadata keys and JSON are written sorted so that
save -> load -> save reproduces the same bytes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save

from .errors import CheckpointLoadError
from .model import CofiPara, module_tag

FORMAT = "cofipara-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    manifest: dict[str, dict]
    config: dict
    phase: str

    def __post_init__(self):
        if set(self.tensors) != set(self.manifest):
            raise CheckpointLoadError("manifest and tensor keys differ", sorted(set(self.tensors) ^ set(self.manifest)))


def from_model(model: CofiPara, config: dict, phase: str, tags=None) -> Checkpoint:
    """Snapshot the model's parameters (optionally only those in ``tags``)."""
    tensors, manifest = {}, {}
    for name, p in model.named_parameters():
        tag = module_tag(name)
        if tags is not None and tag not in tags:
            continue
        t = p.detach().cpu().clone().contiguous()
        tensors[name] = t
        manifest[name] = {
            "shape": list(t.shape),
            "dtype": str(t.dtype).replace("torch.", ""),
            "trainable": bool(p.requires_grad),
            "module": tag,
        }
    return Checkpoint(tensors, manifest, dict(config), str(phase))


def to_bytes(ckpt: Checkpoint) -> bytes:
    metadata = {
        "config": json.dumps(ckpt.config, sort_keys=True),
        "format": FORMAT,
        "manifest": json.dumps(ckpt.manifest, sort_keys=True),
        "phase": ckpt.phase,
        "version": str(VERSION),
    }
    return _canonical_header(save(ckpt.tensors, metadata=metadata))


def _canonical_header(raw: bytes) -> bytes:
    """Rewrite the JSON header with sorted keys.

    The writer's metadata map has no fixed iteration order, so the header
    is re-serialized; tensor offsets are relative to the data section and
    stay valid. The header is space-padded to 8 bytes as the format expects.
    """
    n = int.from_bytes(raw[:8], "little")
    header = json.loads(raw[8 : 8 + n])
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    text += b" " * (-len(text) % 8)
    return len(text).to_bytes(8, "little") + text + raw[8 + n :]


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointLoadError(f"checkpoint {path} does not exist")
    try:
        with safe_open(str(path), framework="pt") as fh:
            meta = fh.metadata() or {}
            tensors = {k: fh.get_tensor(k) for k in fh.keys()}
    except Exception as exc:  # safetensors raises its own error types
        raise CheckpointLoadError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("format") != FORMAT:
        raise CheckpointLoadError(f"{path} is not a {FORMAT} file")
    if int(meta.get("version", -1)) != VERSION:
        raise CheckpointLoadError(f"unsupported checkpoint version {meta.get('version')}")
    return Checkpoint(tensors, json.loads(meta["manifest"]), json.loads(meta["config"]), meta["phase"])


def load_into(model: CofiPara, ckpt: Checkpoint, tags=None) -> list[str]:
    """Copy checkpoint tensors for the given module tags into ``model``.

    Every tensor is shape-checked before anything is written; on mismatch
    the model is untouched and the error lists the offending names.
    """
    params = dict(model.named_parameters())
    wanted = [n for n in ckpt.tensors if tags is None or ckpt.manifest[n]["module"] in tags]
    bad = []
    for name in wanted:
        if name not in params:
            bad.append(f"{name}: not in model")
        elif tuple(params[name].shape) != tuple(ckpt.tensors[name].shape):
            bad.append(f"{name}: checkpoint {tuple(ckpt.tensors[name].shape)} vs model {tuple(params[name].shape)}")
    if tags is not None:
        for name in params:
            if module_tag(name) in tags and name not in ckpt.tensors:
                bad.append(f"{name}: missing from checkpoint")
    if bad:
        raise CheckpointLoadError("incompatible checkpoint:\n  " + "\n  ".join(bad), bad)
    with torch.no_grad():
        for name in wanted:
            params[name].copy_(ckpt.tensors[name].to(params[name].dtype))
    return wanted
