"""Matrix serialization.

Binary container layout (all little-endian)::

    bytes 0..7    magic  b"COVADMX1"
    bytes 8..15   rows   uint64
    bytes 16..23  cols   uint64
    bytes 24..    rows*cols complex entries, row-major, each as (re, im) float64

The CSV form writes one matrix row per line with complex entries as ``re+imj``
(Python ``complex`` syntax), which round-trips through :func:`read_csv`.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

MAGIC = b"COVADMX1"
_HEADER = struct.Struct("<8sQQ")


def to_bytes(matrix: np.ndarray) -> bytes:
    mat = np.atleast_2d(np.asarray(matrix, dtype=np.complex128))
    if mat.ndim != 2:
        raise ValueError("only 2-D matrices can be serialized")
    rows, cols = mat.shape
    body = np.ascontiguousarray(mat).astype("<c16", copy=False).tobytes(order="C")
    return _HEADER.pack(MAGIC, rows, cols) + body


def from_bytes(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise ValueError("truncated matrix container")
    magic, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    expected = _HEADER.size + 16 * rows * cols
    if len(data) != expected:
        raise ValueError(f"container size {len(data)} does not match header ({expected})")
    flat = np.frombuffer(data, dtype="<c16", offset=_HEADER.size, count=rows * cols)
    return flat.astype(np.complex128).reshape(rows, cols)


def write_binary(path, matrix: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(matrix))


def read_binary(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())


def write_csv(path, matrix: np.ndarray) -> None:
    mat = np.atleast_2d(np.asarray(matrix, dtype=np.complex128))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in mat:
            writer.writerow([repr(complex(v)).strip("()") for v in row])


def read_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [[complex(cell) for cell in row] for row in csv.reader(fh) if row]
    return np.array(rows, dtype=np.complex128)
