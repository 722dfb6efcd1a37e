"""Little-endian binary flow files.

Layout: 4-byte magic ``STWF``, uint32 version, uint64 T, uint64 N, then T*N
float64 values in row-major (time, node) order with NaN at missing readings.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from stwave.artifacts import atomic_write
from stwave.data.base import BaseFlowSource, Dataset
from stwave.errors import ParseError

MAGIC = b"STWF"
VERSION = 1
HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("t", "<u8"), ("n", "<u8")])


class BinaryFlowSource(BaseFlowSource):
    format = "binary"

    def read_flow(self) -> tuple[np.ndarray, dict]:
        return read_flow_binary(self.path)


def read_flow_binary(path: str | Path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.itemsize:
        raise ParseError("file is shorter than the header", path=str(path))
    header = np.frombuffer(raw, dtype=HEADER, count=1)[0]
    if header["magic"] != MAGIC:
        raise ParseError(f"bad magic {header['magic']!r}", path=str(path))
    if int(header["version"]) != VERSION:
        raise ParseError(f"unsupported version {int(header['version'])}", path=str(path))
    t, n = int(header["t"]), int(header["n"])
    body = raw[HEADER.itemsize :]
    expected = t * n * 8
    if len(body) != expected:
        raise ParseError(
            f"payload holds {len(body)} bytes, header promises {expected} ({t} x {n})",
            path=str(path),
        )
    values = np.frombuffer(body, dtype="<f8").reshape(t, n).astype(np.float64)
    accounting = {
        "layout": "binary",
        "rows_read": t,
        "rows_used": t,
        "cells_missing": int((~np.isfinite(values)).sum()),
    }
    return values, accounting


def write_flow_binary(path: str | Path, values: np.ndarray | Dataset) -> Path:
    if isinstance(values, Dataset):
        values = values.to_array()
    values = np.ascontiguousarray(values, dtype="<f8")
    if values.ndim != 2:
        raise ValueError(f"binary flow must be (T, N), got shape {values.shape}")
    header = np.zeros(1, dtype=HEADER)
    header["magic"] = MAGIC
    header["version"] = VERSION
    header["t"], header["n"] = values.shape
    payload = header.tobytes() + values.tobytes()
    return atomic_write(path, lambda f: f.write(payload))
