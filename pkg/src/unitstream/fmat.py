"""FMAT on-disk format for feature matrices.

Layout: magic b"FMAT", u32 LE rows, u32 LE cols, then rows*cols float32 LE
values in row-major order. In-memory matrices are float64; writing narrows
to float32.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FMAT"
_HEADER = struct.Struct("<4sII")


class FmatError(ValueError):
    """Malformed FMAT file."""


def write_fmat(path, mat: np.ndarray) -> None:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise FmatError(f"FMAT stores 2-D matrices, got shape {mat.shape}")
    rows, cols = mat.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, cols))
        fh.write(mat.astype("<f4").tobytes(order="C"))


def read_fmat(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FmatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FmatError(f"{path}: bad magic {magic!r}")
    need = _HEADER.size + 4 * rows * cols
    if len(raw) != need:
        raise FmatError(f"{path}: expected {need} bytes for {rows}x{cols}, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return data.astype(np.float64).reshape(rows, cols)
