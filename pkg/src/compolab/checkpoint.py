"""Versioned binary container for model and optimizer state.

Layout: magic ``CLAB``, u32 version, u32 header length, UTF-8 JSON header
(dims, vocab sizes, arbitrary metadata), then named blobs. Each blob is
u16 name length, name bytes, u8 rank, u64 dims, raw little-endian float64.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

__all__ = ["FORMAT_VERSION", "write_container", "read_container", "blob_hash"]

MAGIC = b"CLAB"
FORMAT_VERSION = 1


def write_container(path, header: dict, blobs: dict):
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(payload)))
        fh.write(payload)
        for name in sorted(blobs):
            arr = np.asarray(blobs[name], dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            # ascontiguousarray would promote 0-d to 1-d, so keep arr's shape
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_container(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint container (magic {magic!r})")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        blobs = {}
        while True:
            raw = fh.read(2)
            if not raw:
                break
            (nlen,) = struct.unpack("<H", raw)
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            blobs[name] = np.array(data, dtype=np.float64)
        return header, blobs


def blob_hash(blobs: dict) -> str:
    """Order-independent digest of named arrays (name + shape + bytes)."""
    h = hashlib.sha256()
    for name in sorted(blobs):
        arr = np.asarray(blobs[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
