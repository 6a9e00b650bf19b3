"""Binary checkpoint container for named float64 tensors.

Layout (all integers little-endian):

    magic "LRD1"
    u32 format version
    u32 tensor count
    per tensor: u32 name length, UTF-8 name,
                u32 rank, rank * u64 dims,
                row-major float64 payload
    u32 metadata length, UTF-8 "key=value" lines

A sha256 of the tensor section is stored in the metadata under
``content_hash`` and checked on read, so payload tampering and truncation are
both detected; reads never return a partial result. Writes go through a
temporary file plus rename.
"""

from __future__ import annotations

import hashlib
import os
import struct

import numpy as np

from .errors import (
    CheckpointCorruptError,
    CheckpointMagicError,
    CheckpointVersionError,
    ValidationError,
)

MAGIC = b"LRD1"
VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def _tensor_section(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [_U32.pack(len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(arr.ndim))
        for dim in arr.shape:
            chunks.append(_U64.pack(dim))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def _encode_metadata(metadata: dict[str, str]) -> bytes:
    lines = []
    for key, value in metadata.items():
        key, value = str(key), str(value)
        if "=" in key or "\n" in key or "\n" in str(value):
            raise ValidationError(f"metadata key/value may not contain '=' in key or newlines: {key!r}")
        lines.append(f"{key}={value}")
    return "\n".join(lines).encode("utf-8")


def _decode_metadata(blob: bytes) -> dict[str, str]:
    out = {}
    if not blob:
        return out
    for line in blob.decode("utf-8").split("\n"):
        key, _, value = line.partition("=")
        out[key] = value
    return out


def write_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict[str, str] | None = None) -> None:
    """Write tensors plus metadata atomically (temp file, then rename)."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ValidationError("checkpoint: tensor names must be unique")
    section = _tensor_section(tensors)
    meta = dict(metadata or {})
    meta["content_hash"] = hashlib.sha256(section).hexdigest()
    meta_blob = _encode_metadata(meta)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(VERSION))
        fh.write(section)
        fh.write(_U32.pack(len(meta_blob)))
        fh.write(meta_blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointCorruptError(
                f"checkpoint truncated: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read a checkpoint back bit-exactly; never returns a partial load."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointMagicError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported format version {version}")
    section_start = r.pos
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u64() for _ in range(rank))
        n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = r.take(8 * n_items)
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        if name in tensors:
            raise CheckpointCorruptError(f"{path}: duplicate tensor name '{name}'")
        tensors[name] = arr
    section_end = r.pos
    metadata = _decode_metadata(r.take(r.u32()))
    if r.pos != len(blob):
        raise CheckpointCorruptError(f"{path}: {len(blob) - r.pos} trailing bytes after metadata")
    stored = metadata.get("content_hash")
    if stored is not None:
        actual = hashlib.sha256(blob[section_start:section_end]).hexdigest()
        if actual != stored:
            raise CheckpointCorruptError(f"{path}: content hash mismatch; file was modified")
    return tensors, metadata


def verify_checkpoint(path) -> dict:
    """Round-trip verification; returns tensor count and total element count."""
    tensors, metadata = read_checkpoint(path)
    return {
        "tensors": len(tensors),
        "elements": int(sum(a.size for a in tensors.values())),
        "metadata_keys": len(metadata),
    }
