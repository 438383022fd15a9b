"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"PARCKPT\\0"                 8-byte magic
    u32  format version
    u64  header length N
    N    bytes UTF-8 JSON header (sorted keys)
    ...  raw tensor bytes, little-endian, in header order
    32   SHA-256 of everything above

The header lists every tensor as ``{"name", "dtype", "shape", "offset"}``
with offsets relative to the start of the tensor section.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"PARCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray]

    @property
    def version(self) -> int:
        return self.header["format_version"]


def encode_checkpoint(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    index, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, order="C")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        index.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    full_header = dict(header, format_version=FORMAT_VERSION, tensors=index)
    head = json.dumps(full_header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 12 + 32 or not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("integrity check failed: file is corrupted or truncated")
    version, head_len = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + head_len].decode("utf-8"))
    data = memoryview(body)[start + head_len:]
    tensors = {}
    for entry in header.pop("tensors"):
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    return Checkpoint(header, tensors)


def save_checkpoint(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(header, tensors)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
