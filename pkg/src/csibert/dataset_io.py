"""CSID v1 on-disk dataset container.

A dataset directory holds

* ``manifest.json`` -- magic ``"CSID"``, ``version``, the generating config
  and one record ``{index, cell, ue, scenario, offset}`` per matrix;
* ``data.bin`` -- every matrix in manifest order as interleaved
  little-endian float32 ``(re, im)`` pairs, row-major ``[s][t][r]``.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable

import numpy as np

from .channel_sim import Dataset, DatasetConfig, iter_dataset
from .exceptions import FormatError

MAGIC = "CSID"
VERSION = 1
_DTYPE = np.dtype("<c8")


def _manifest(config: DatasetConfig, records: list[dict]) -> dict:
    return {
        "magic": MAGIC,
        "version": VERSION,
        "dtype": "complex64-le",
        "shape": list(config.dims),
        "count": len(records),
        "config": config.to_dict(),
        "records": records,
    }


def _write(out_dir: str | os.PathLike, config: DatasetConfig, items: Iterable[tuple[dict, np.ndarray]]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    matrix_bytes = int(np.prod(config.dims)) * _DTYPE.itemsize
    with open(out / "data.bin", "wb") as fh:
        for rec, mat in items:
            rec = dict(rec, offset=rec["index"] * matrix_bytes)
            fh.write(np.ascontiguousarray(mat, dtype=_DTYPE).tobytes())
            records.append(rec)
    with open(out / "manifest.json", "w") as fh:
        json.dump(_manifest(config, records), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out


def write_dataset(dataset: Dataset, out_dir: str | os.PathLike) -> Path:
    items = ((dict(rec, index=i), dataset.data[i]) for i, rec in enumerate(dataset.records))
    return _write(out_dir, dataset.config, items)


def generate_to_disk(config: DatasetConfig, out_dir: str | os.PathLike, threads: int = 1) -> Path:
    """Stream a freshly generated dataset to disk without holding it in memory."""
    return _write(out_dir, config, iter_dataset(config, threads=threads))


def read_manifest(path: str | os.PathLike) -> dict:
    path = Path(path)
    try:
        with open(path / "manifest.json") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}/manifest.json is not valid JSON: {exc}") from exc
    if manifest.get("magic") != MAGIC:
        raise FormatError(f"{path}: bad magic {manifest.get('magic')!r}, expected {MAGIC!r}")
    if manifest.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported CSID version {manifest.get('version')!r}")
    return manifest


def read_dataset(path: str | os.PathLike) -> Dataset:
    path = Path(path)
    manifest = read_manifest(path)
    config = DatasetConfig.from_dict(manifest["config"])
    shape = tuple(manifest["shape"])
    count = manifest["count"]
    raw = np.fromfile(path / "data.bin", dtype=_DTYPE)
    if raw.size != count * int(np.prod(shape)):
        raise FormatError(
            f"{path}/data.bin holds {raw.size} complex entries, manifest implies {count * int(np.prod(shape))}"
        )
    data = raw.reshape((count,) + shape).astype(np.complex64)
    records = [{k: r[k] for k in ("index", "cell", "ue", "scenario")} for r in manifest["records"]]
    return Dataset(config, data, records)
