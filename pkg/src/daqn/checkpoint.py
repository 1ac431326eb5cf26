"""Versioned binary container for named float64 tensors.

Layout::

    b"DAQNCKPT"                      8-byte magic
    uint32 little-endian             format version
    uint64 little-endian             manifest length in bytes
    manifest                         UTF-8 JSON, keys sorted
    payload                          concatenated float64 little-endian values

The manifest lists each tensor's name, shape, element offset and count, the
caller's metadata, and the SHA-256 of the payload. Writing is deterministic:
identical tensors and metadata give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DAQNCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        # asarray keeps 0-d arrays 0-d; tobytes always emits C order
        arr = np.asarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "tensors": entries,
        "meta": dict(meta or {}),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + payload


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a DAQN checkpoint (bad magic)")
    if len(blob) < 20:
        raise CheckpointError("checkpoint truncated inside the header")
    version, head_len = struct.unpack("<IQ", blob[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = json.loads(blob[20:20 + head_len].decode("utf-8"))
    payload = blob[20 + head_len:]
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise CheckpointError("checkpoint payload checksum mismatch")
    if len(payload) % 8:
        raise CheckpointError("checkpoint payload is not a whole number of float64 values")
    flat = np.frombuffer(payload, dtype="<f8")
    if sum(e["count"] for e in manifest["tensors"]) != flat.size:
        raise CheckpointError("checkpoint payload size does not match its manifest")
    tensors = {}
    for e in manifest["tensors"]:
        vals = flat[e["offset"]:e["offset"] + e["count"]]
        tensors[e["name"]] = vals.astype(np.float64).reshape(e["shape"])
    return tensors, manifest["meta"]


def save(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(tensors, meta))
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)
