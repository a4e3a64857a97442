"""Checkpoint container.

Layout::

    b"TVCKPT\\x00\\x00"            8-byte magic
    uint32 little-endian          format version
    uint64 little-endian          header length in bytes
    header                        UTF-8 JSON: config, digest, metadata, tensor table
    payload                       raw little-endian values, concatenated in table order

Each table entry records name, shape, dtype ("<f8" or "<f4"), byte offset and
byte length, so the file is readable without this package.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TVCKPT\x00\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, config: dict, digest: str, meta: dict | None = None) -> None:
    table = []
    chunks = []
    offset = 0
    for name, arr in params.items():
        arr = np.asarray(arr)
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": dt, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": config, "config_digest": digest, "meta": meta or {}, "tensors": table},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path):
    """Return ``(params, header)``; ``params`` maps name to a numpy array."""
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", blob, 12)
    start = 20
    header = json.loads(blob[start : start + hlen].decode("utf-8"))
    payload = memoryview(blob)[start + hlen :]
    params = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"])
        params[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return params, header
