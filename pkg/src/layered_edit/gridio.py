"""Portable binary dumps for grids and masks, plus PGM previews.

Layout: a 16-byte header (4-byte magic, then little-endian u32 ``h, w, c``)
followed by little-endian float64 values in row-major ``(h, w, c)`` order.
Grids use the magic ``LGRD``; masks use ``LMSK`` with ``c = 1``.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .grid import ParameterError

GRID_MAGIC = b"LGRD"
MASK_MAGIC = b"LMSK"
_HEADER = struct.Struct("<4sIII")


def encode(values, magic: bytes = GRID_MAGIC) -> bytes:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ParameterError(f"cannot encode array of shape {arr.shape}")
    if magic == MASK_MAGIC and arr.shape[2] != 1:
        raise ParameterError("masks must have a single channel")
    h, w, c = arr.shape
    body = np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C")
    return _HEADER.pack(magic, h, w, c) + body


def decode(blob: bytes) -> tuple[bytes, np.ndarray]:
    if len(blob) < _HEADER.size:
        raise ParameterError("truncated grid header")
    magic, h, w, c = _HEADER.unpack_from(blob)
    if magic not in (GRID_MAGIC, MASK_MAGIC):
        raise ParameterError(f"unknown grid magic {magic!r}")
    n = h * w * c
    if len(blob) != _HEADER.size + 8 * n:
        raise ParameterError(f"grid body has {len(blob) - _HEADER.size} bytes, expected {8 * n}")
    arr = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).astype(np.float64).reshape(h, w, c)
    return magic, arr


def write_grid(path, grid) -> Path:
    path = Path(path)
    path.write_bytes(encode(grid, GRID_MAGIC))
    return path


def write_mask(path, mask) -> Path:
    path = Path(path)
    path.write_bytes(encode(mask, MASK_MAGIC))
    return path


def read_grid(path) -> np.ndarray:
    magic, arr = decode(Path(path).read_bytes())
    if magic != GRID_MAGIC:
        raise ParameterError(f"{path}: expected an LGRD grid, found {magic!r}")
    return arr


def read_mask(path) -> np.ndarray:
    magic, arr = decode(Path(path).read_bytes())
    if magic != MASK_MAGIC:
        raise ParameterError(f"{path}: expected an LMSK mask, found {magic!r}")
    return arr[:, :, 0]


def write_pgm(path, values) -> Path:
    """Write a binary P5 PGM, mapping ``[min, max]`` linearly onto 0..255.

    Multi-channel grids are previewed through their channel mean.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    h, w = pixels.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def digest(data: bytes) -> str:
    """64-bit content hash as 16 hex characters."""
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def file_digest(path) -> str:
    return digest(Path(path).read_bytes())
