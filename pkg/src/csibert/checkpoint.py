"""Single-file parameter checkpoints.

Layout::

    b"CSIBCKPT"                 8-byte magic
    uint32 (little endian)      length of the JSON header in bytes
    JSON header                 {"format_version", "manifest", "tensors": [...]}
    blobs                       little-endian float64, one per tensor, in header order

Each tensor entry records ``name``, ``shape``, ``offset`` (relative to the
first blob) and ``nbytes``. The header is written with sorted keys and no
timestamps so identical inputs give byte-identical files.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError

MAGIC = b"CSIBCKPT"
FORMAT_VERSION = 1
_F64 = np.dtype("<f8")


def save_checkpoint(path: str | os.PathLike, arrays: dict[str, np.ndarray], manifest: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype=_F64).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "manifest": manifest, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, manifest)``; raises :class:`FormatError` on any mismatch."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('format_version')!r}")
    body = raw[12 + hlen :]
    arrays = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(body):
            raise FormatError(f"{path}: tensor {entry['name']!r} runs past end of file")
        arr = np.frombuffer(body[start : start + n], dtype=_F64).astype(np.float64)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise FormatError(f"{path}: tensor {entry['name']!r} size does not match shape {shape}")
        arrays[entry["name"]] = arr.reshape(shape)
    return arrays, header["manifest"]
