"""Binary checkpoint format.

Layout::

    b"ALBSRG01"                  8-byte magic
    uint64 little-endian         manifest length in bytes
    manifest                     UTF-8 JSON (config, seed, meta, parameter table)
    payload                      little-endian float32 arrays, manifest order

Parameter offsets in the manifest are relative to the start of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelWeights, parameter_names
from .numerics import Parameter

MAGIC = b"ALBSRG01"
FORMAT_VERSION = 1


class CorruptCheckpointError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def to_bytes(weights: ModelWeights) -> bytes:
    table, blobs, offset = [], [], 0
    for name in parameter_names(weights.config):
        arr = np.ascontiguousarray(weights.params[name].data, dtype="<f4")
        raw = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "<f4",
        "config": weights.config.to_dict(),
        "seed": weights.seed,
        "meta": weights.meta,
        "parameters": table,
    }
    head = canonical_json(manifest)
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def from_bytes(buf: bytes) -> ModelWeights:
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise CorruptCheckpointError("bad magic; not an ALBSRG01 checkpoint")
    (n,) = struct.unpack("<Q", buf[8:16])
    if 16 + n > len(buf):
        raise CorruptCheckpointError("manifest length exceeds file size")
    try:
        manifest = json.loads(buf[16:16 + n].decode("utf-8"))
        config = ModelConfig.from_dict(manifest["config"])
        table = manifest["parameters"]
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptCheckpointError(f"unreadable manifest: {e}") from e
    payload = memoryview(buf)[16 + n:]
    expected = parameter_names(config)
    if [t["name"] for t in table] != expected:
        raise CorruptCheckpointError("parameter table does not match the model config")
    params, pos = {}, 0
    for t in table:
        shape = tuple(t["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if t["offset"] != pos or t["nbytes"] != nbytes or pos + nbytes > len(payload):
            raise CorruptCheckpointError(f"bad extent for {t['name']}")
        arr = np.frombuffer(payload[pos:pos + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
        params[t["name"]] = Parameter(arr)
        pos += nbytes
    if pos != len(payload):
        raise CorruptCheckpointError("trailing bytes after payload")
    return ModelWeights(config, params, manifest.get("seed"), manifest.get("meta") or {})


def save(weights: ModelWeights, path: str | Path) -> str:
    """Write a checkpoint; returns its id (content hash prefix)."""
    buf = to_bytes(weights)
    Path(path).write_bytes(buf)
    return checkpoint_id(buf)


def load(path: str | Path) -> ModelWeights:
    return from_bytes(Path(path).read_bytes())


def checkpoint_id(buf_or_path) -> str:
    buf = buf_or_path if isinstance(buf_or_path, (bytes, bytearray)) else Path(buf_or_path).read_bytes()
    return hashlib.sha256(buf).hexdigest()[:16]
