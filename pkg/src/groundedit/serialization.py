"""Documented binary file layouts.

Dense 4-D arrays (flow fields [N-1, H, W, 2], latents [N, h, w, c], null
trajectories [N, S, L, d]): a 16-byte header of four little-endian uint32
dims followed by row-major little-endian float32 values.

Matrix bundles (attention weights): little-endian uint32 count, then per
array a uint32 ndim and its uint32 dims, then every array body in order,
row-major float32.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


def save_f32_4d(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"expected a 4-D array, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack("<4I", *arr.shape))
        f.write(arr.astype("<f4").tobytes(order="C"))


def load_f32_4d(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise ValueError(f"truncated header in {path}")
        dims = struct.unpack("<4I", header)
        count = int(np.prod(dims))
        body = f.read(count * 4)
        if len(body) != count * 4:
            raise ValueError(f"truncated body in {path}: expected {count} float32s")
        extra = f.read(1)
        if extra:
            raise ValueError(f"trailing bytes in {path}")
    return np.frombuffer(body, dtype="<f4").reshape(dims).astype(np.float32)


def save_matrices(path: str | Path, arrays: list[np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            a = np.asarray(a)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        for a in arrays:
            f.write(np.asarray(a, dtype="<f4").tobytes(order="C"))


def load_matrices(path: str | Path) -> list[np.ndarray]:
    with open(path, "rb") as f:
        (count,) = struct.unpack("<I", f.read(4))
        shapes = []
        for _ in range(count):
            (ndim,) = struct.unpack("<I", f.read(4))
            shapes.append(struct.unpack(f"<{ndim}I", f.read(4 * ndim)))
        arrays = []
        for shape in shapes:
            n = int(np.prod(shape)) if shape else 1
            body = f.read(n * 4)
            if len(body) != n * 4:
                raise ValueError(f"truncated matrix body in {path}")
            arrays.append(np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32))
    return arrays
