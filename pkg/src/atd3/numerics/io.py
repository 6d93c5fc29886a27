"""Flat binary persistence for named float64 matrices.

Layout::

    b"ATD3" | version:u8 | count:u32 | count x (name_len:u16, name utf-8, rows:u32, cols:u32)
    | little-endian float64 payload, matrices in declaration order, row-major

A JSON manifest with names and shapes is written next to the binary file
(``<path>.json``).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ATD3"
VERSION = 1


def save_params(path, params: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    header = bytearray(MAGIC)
    header += struct.pack("<BI", VERSION, len(params))
    for name, arr in params.items():
        if arr.ndim != 2:
            raise ValueError(f"{name}: expected a matrix, got shape {arr.shape}")
        raw = name.encode("utf-8")
        header += struct.pack("<H", len(raw)) + raw + struct.pack("<II", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    manifest = {
        "format": "ATD3",
        "version": VERSION,
        "matrices": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    if meta:
        manifest["meta"] = meta
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2))
    return path


def load_params(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 9
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + n].decode("utf-8")
        off += n
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        table.append((name, rows, cols))
    out = {}
    for name, rows, cols in table:
        size = rows * cols
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(rows, cols)
        off += 8 * size
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def load_manifest(path) -> dict:
    return json.loads(Path(str(path) + ".json").read_text())
