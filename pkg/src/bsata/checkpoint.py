"""Versioned checkpoint archive.

Layout (all integers little-endian)::

    8 bytes   magic b"BSATACKP"
    uint32    format version
    uint64    manifest length in bytes
    manifest  UTF-8 JSON: config, config_hash, meta, components
    blocks    raw little-endian float32 data, one block per component

Each component entry records ``name``, ``shape``, ``offset`` (relative to the
first block) and ``nbytes``.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointWriteFailure, ManifestMismatch

MAGIC = b"BSATACKP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


def config_hash(structure: dict) -> str:
    return hashlib.sha256(json.dumps(structure, sort_keys=True).encode()).hexdigest()


def save_tensors(path, tensors: dict, structure: dict, meta: dict | None = None):
    """Write ``tensors`` atomically (temp file then rename)."""
    path = Path(path)
    components, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        blob = arr.tobytes()
        components.append({"name": name, "shape": list(arr.shape), "dtype": "<f4",
                           "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": structure,
        "config_hash": config_hash(structure),
        "meta": meta or {},
        "components": components,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "wb") as f:
            f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(mbytes)))
            f.write(mbytes)
            for b in blobs:
                f.write(b)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointWriteFailure(f"could not write {path}: {exc}") from exc


def read_manifest(path) -> tuple:
    """Return (manifest, raw bytes, payload offset) after validating header and size."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ManifestMismatch(f"{path}: truncated header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ManifestMismatch(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise ManifestMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _HEADER.size + mlen
    if len(data) < start:
        raise ManifestMismatch(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[_HEADER.size:start])
    except ValueError as exc:
        raise ManifestMismatch(f"{path}: unreadable manifest") from exc
    if manifest.get("format_version") != version:
        raise ManifestMismatch(f"{path}: manifest/header version disagree")
    need = sum(c["nbytes"] for c in manifest["components"])
    if len(data) - start != need:
        raise ManifestMismatch(f"{path}: payload is {len(data) - start} bytes, manifest says {need}")
    if config_hash(manifest["config"]) != manifest["config_hash"]:
        raise ManifestMismatch(f"{path}: config hash does not match recorded config")
    return manifest, data, start


def load_tensors(path, expected_structure: dict | None = None) -> tuple:
    manifest, data, start = read_manifest(path)
    if expected_structure is not None and config_hash(expected_structure) != manifest["config_hash"]:
        raise ManifestMismatch(f"{path}: checkpoint config differs from the requested model config")
    out = {}
    for c in manifest["components"]:
        lo = start + c["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=c["nbytes"] // 4, offset=lo)
        out[c["name"]] = torch.from_numpy(arr.reshape(c["shape"]).astype(np.float32))
    return out, manifest


def load_into(module: torch.nn.Module, tensors: dict, prefix: str = ""):
    """Copy ``prefix``-named tensors into ``module``'s parameters, bitwise."""
    own = dict(module.named_parameters())
    names = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = sorted(set(own) - set(names))
    if missing:
        raise ManifestMismatch(f"checkpoint lacks parameters: {missing[:10]}")
    with torch.no_grad():
        for name, p in own.items():
            t = names[name]
            if tuple(t.shape) != tuple(p.shape):
                raise ManifestMismatch(f"{name}: shape {tuple(t.shape)} != {tuple(p.shape)}")
            p.copy_(t.to(p.dtype))


def optimizer_tensors(optimizer: torch.optim.Optimizer, names: dict) -> dict:
    """Flatten Adam-style per-parameter state; ``names`` maps param id -> name."""
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            for key, value in optimizer.state.get(p, {}).items():
                t = value if torch.is_tensor(value) else torch.tensor(float(value))
                out[f"optim.{names[id(p)]}.{key}"] = t.reshape(-1) if t.ndim == 0 else t
    return out


def restore_optimizer(optimizer: torch.optim.Optimizer, tensors: dict, names: dict):
    for group in optimizer.param_groups:
        for p in group["params"]:
            prefix = f"optim.{names[id(p)]}."
            state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
            if not state:
                continue
            st = {}
            for key, v in state.items():
                st[key] = v.reshape(()) if key == "step" else v.to(p.dtype).clone()
            optimizer.state[p] = st
