"""Binary checkpoint format.

Layout::

    8 bytes   magic  b"RADCKPT\\0"
    4 bytes   format version, uint32 little-endian
    8 bytes   header length, uint64 little-endian
    header    UTF-8 JSON (sorted keys): kind, seed, config, meta and a tensor
              index of {name, shape, offset, count} entries
    payload   every tensor as little-endian float64, in index order

The header is canonical JSON and the payload is raw scalars, so loading a
checkpoint and saving it again reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError

MAGIC = b"RADCKPT\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_SCALAR = np.dtype("<f8")


@dataclass
class Checkpoint:
    kind: str
    tensors: dict[str, np.ndarray]
    config: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    meta: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _header(ckpt: Checkpoint) -> tuple[bytes, list[np.ndarray]]:
    index, arrays, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        a = np.array(arr, dtype=_SCALAR, order="C")
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        arrays.append(a)
        offset += a.size * _SCALAR.itemsize
    head = {
        "kind": ckpt.kind,
        "seed": int(ckpt.seed),
        "config": ckpt.config,
        "meta": ckpt.meta,
        "tensors": index,
    }
    return json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8"), arrays


def dumps(ckpt: Checkpoint) -> bytes:
    head, arrays = _header(ckpt)
    parts = [_PREFIX.pack(MAGIC, ckpt.version, len(head)), head]
    parts.extend(a.tobytes() for a in arrays)
    return b"".join(parts)


def loads(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint: missing header")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not a radious checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    try:
        head = json.loads(blob[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    payload = memoryview(blob)[start + head_len:]
    tensors = {}
    for entry in head["tensors"]:
        end = entry["offset"] + entry["count"] * _SCALAR.itemsize
        if end > len(payload):
            raise CheckpointError(f"truncated checkpoint: tensor {entry['name']} runs past the payload")
        flat = np.frombuffer(payload[entry["offset"]:end], dtype=_SCALAR)
        tensors[entry["name"]] = flat.reshape(tuple(entry["shape"])).copy()
    return Checkpoint(head["kind"], tensors, head.get("config", {}), head.get("seed", 0), head.get("meta", {}), version)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)
