"""GPDE binary dataset files with a JSON sidecar.

Layout (little-endian): magic ``b"GPDE"``, version u32 = 1, d u32, n u32,
N u64, then N forcing vectors and N solution vectors of n^d float64 each.
Metadata lives in ``<path>.meta.json``.
"""

from __future__ import annotations

import json
import logging
import struct
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .grid_pde import Grid
from .peeling import TrainingSet

log = logging.getLogger(__name__)

MAGIC = b"GPDE"
VERSION = 1
HEADER = struct.Struct("<4sIIIQ")


class DatasetFormatError(ValueError):
    pass


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def dataset_write(path, data: TrainingSet):
    path = Path(path)
    N = len(data)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, data.grid.d, data.grid.n, N))
        fh.write(np.ascontiguousarray(data.forcings, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(data.solutions, dtype="<f8").tobytes())
    meta = dict(data.meta)
    meta.setdefault("created", datetime.now(timezone.utc).isoformat())
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))
    return path


def dataset_read(path) -> TrainingSet:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise DatasetFormatError(f"{path}: file too short for header ({len(raw)} < {HEADER.size} bytes)")
    magic, version, d, n, N = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}, expected {VERSION}")
    grid = Grid(d, n)
    expected = HEADER.size + 2 * N * grid.total * 8
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: length mismatch, expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f8", offset=HEADER.size).astype(np.float64)
    body = body.reshape(2, N, grid.total)
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    else:
        log.warning("%s: metadata sidecar %s missing", path, side.name)
    return TrainingSet(grid, body[0], body[1], meta)
