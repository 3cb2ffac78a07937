"""Checkpoint files: a JSON manifest followed by one little-endian float32 blob.

Layout::

    MGCKPT 1 <manifest length in bytes>\\n
    <manifest: JSON with config, metadata and the ordered parameter table>
    <blob>

Each parameter-table row is ``{"name", "shape", "offset"}`` with ``offset`` in
bytes from the start of the blob.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .nn.layers import Module

MAGIC = b"MGCKPT 1 "


def encode(module: Module, kind: str, config: dict, meta: dict | None = None) -> bytes:
    table, chunks, offset = [], [], 0
    for name, p in module.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"kind": kind, "config": config, "meta": meta or {}, "params": table, "blob_bytes": offset}
    head = json.dumps(manifest, sort_keys=True, indent=1).encode()
    return MAGIC + str(len(head)).encode() + b"\n" + head + b"".join(chunks)


def save(module: Module, path: str | Path, kind: str, config: dict, meta: dict | None = None) -> str:
    data = encode(module, kind, config, meta)
    Path(path).write_bytes(data)
    return content_hash(data)


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_hash(path: str | Path) -> str:
    return content_hash(Path(path).read_bytes())


def read(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Manifest and name -> float32 array for a checkpoint file."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint")
    nl = raw.index(b"\n")
    n = int(raw[len(MAGIC):nl])
    manifest = json.loads(raw[nl + 1:nl + 1 + n])
    blob = raw[nl + 1 + n:]
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"{path}: blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    arrays = {}
    for row in manifest["params"]:
        count = int(np.prod(row["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=row["offset"])
        arrays[row["name"]] = arr.reshape(row["shape"]).astype(np.float32)
    return manifest, arrays


def load_into(module: Module, arrays: dict[str, np.ndarray]) -> None:
    params = module.parameters()
    if set(params) != set(arrays):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise CheckpointError(f"parameter mismatch; missing {missing[:3]}, unexpected {extra[:3]}")
    for name, p in params.items():
        if p.data.shape != arrays[name].shape:
            raise CheckpointError(f"{name}: shape {arrays[name].shape} != {p.data.shape}")
        p.data = arrays[name].copy()


def save_model(model, path: str | Path, meta: dict | None = None) -> str:
    meta = {"trained_steps": getattr(model, "trained_steps", 0), **(meta or {})}
    return save(model, path, "dit", model.cfg.to_dict(), meta)


def load_model(path: str | Path):
    from .dit import DiT, ModelConfig

    manifest, arrays = read(path)
    if manifest["kind"] != "dit":
        raise CheckpointError(f"{path} holds a {manifest['kind']!r}, not a model")
    model = DiT(ModelConfig.from_dict(manifest["config"]))
    load_into(model, arrays)
    model.trained_steps = int(manifest["meta"].get("trained_steps", 0))
    return model


def parameter_bytes(module: Module) -> bytes:
    """Concatenated raw parameter bytes, for frozenness comparisons."""
    return b"".join(np.ascontiguousarray(p.data).tobytes() for _, p in module.named_parameters())
