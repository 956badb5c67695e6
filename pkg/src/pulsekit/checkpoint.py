"""``PKT1`` checkpoint files.

Layout (little-endian)::

    b"PKT1"  u32 version
    repeated until EOF:
        u32 name_length, UTF-8 name, u32 rank, rank x u64 dims,
        prod(dims) x f32 row-major values

Non-tensor metadata (configs, training step, validation loss) is stored as
a rank-1 record named ``meta.json`` whose values are the UTF-8 bytes of a
JSON document.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PKT1"
VERSION = 1
META_KEY = "meta.json"


class CheckpointError(ValueError):
    pass


def encode_meta(meta: dict) -> np.ndarray:
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def decode_meta(values: np.ndarray) -> dict:
    return json.loads(bytes(values.astype(np.uint8).tolist()).decode("utf-8"))


def write_pkt(path, tensors: dict, meta: dict | None = None):
    """Write named arrays (cast to float32) in insertion order."""
    records = dict(tensors)
    if meta is not None:
        records[META_KEY] = encode_meta(meta)
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION))
        for name, value in records.items():
            arr = np.asarray(value, dtype="<f4", order="C")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)) + encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def read_pkt(path):
    """Return ``(tensors, meta)``; ``meta`` is ``{}`` when absent."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a PKT1 file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 8
    tensors = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4: pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{rank}Q", data, pos + 4)
            pos += 4 + 8 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            tensors[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt record") from exc
    meta = decode_meta(tensors.pop(META_KEY)) if META_KEY in tensors else {}
    return tensors, meta
