"""Checkpoint encoding: versioned JSON header followed by raw little-endian float64 tensors.

The byte stream depends only on tensor values, names and metadata, so two
bitwise-equal training states produce byte-identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"RMSCKPT\x00"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        blob = np.ascontiguousarray(tensors[name], dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(tensors[name])), "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": VERSION, "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(blobs))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not an rmsdepth checkpoint")
    try:
        version, hlen = struct.unpack_from("<II", buf, len(MAGIC))
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated header") from exc
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: checkpoint version {version}, expected {VERSION}")
    start = len(MAGIC) + 8
    header = json.loads(buf[start:start + hlen])
    base = start + hlen
    tensors = {}
    for e in header["tensors"]:
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(buf):
            raise CheckpointFormatError(f"{path}: tensor {e['name']} truncated")
        tensors[e["name"]] = np.frombuffer(buf, dtype="<f8", count=e["nbytes"] // 8, offset=lo) \
            .astype(np.float64).reshape(e["shape"])
    return tensors, header["meta"]
