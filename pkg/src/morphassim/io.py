"""FMAT1 binary matrix files and small CSV helpers.

Layout: 8-byte magic ``FMAT1\\0\\0\\0``, u64 rows, u64 cols (little-endian),
then ``rows * cols`` float64 little-endian values in column-major order.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"FMAT1\x00\x00\x00"
_HEADER = struct.Struct("<8sQQ")


class FormatError(ValueError):
    """Raised when a file does not follow the expected on-disk format."""


def write_fmat(path: str | Path, matrix) -> None:
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"FMAT1 stores 2D matrices, got ndim={a.ndim}")
    rows, cols = a.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, cols))
        fh.write(np.asfortranarray(a).astype("<f8").tobytes(order="F"))


def read_fmat(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated FMAT1 header")
    magic, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 8 * rows * cols
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size, count=rows * cols)
    return flat.reshape((rows, cols), order="F").astype(np.float64)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Write a CSV with a fixed header; floats use ``repr`` so output is exact and stable."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        r = list(csv.reader(fh))
    return r[0], r[1:]
