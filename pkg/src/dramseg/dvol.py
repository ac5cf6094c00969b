"""Minimal single-file volume format (DVOL1) and the Volume container.

Layout, little-endian throughout:
  bytes 0..5    magic ``DVOL1\\x00``
  bytes 6..17   dims D, W, H as uint32
  bytes 18..29  voxel spacing (mm) per axis as float32
  byte  30      dtype code: 0 = float32, 1 = uint8
  bytes 31..    voxel payload, C-order with D the slowest axis

The writer is byte-deterministic: same array + spacing -> same file.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"DVOL1\x00"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODE_FOR = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


@dataclass
class Volume:
    """A 3D image with physical voxel spacing in millimetres."""

    data: np.ndarray  # (D, W, H), float32 or uint8
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"expected 3D array, got shape {self.data.shape}")
        if self.data.dtype not in _CODE_FOR:
            raise ValueError(f"unsupported dtype {self.data.dtype}; use float32 or uint8")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive floats, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def voxel_volume_mm3(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]


def write_dvol(path: str | Path, volume: Volume) -> None:
    data = volume.data
    code = _CODE_FOR[data.dtype]
    header = MAGIC + struct.pack(
        "<3I3fB",
        data.shape[0], data.shape[1], data.shape[2],
        volume.spacing[0], volume.spacing[1], volume.spacing[2],
        code,
    )
    payload = np.ascontiguousarray(data.astype(_DTYPE_CODES[code], copy=False)).tobytes()
    Path(path).write_bytes(header + payload)


def read_dvol(path: str | Path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < 31 or raw[:6] != MAGIC:
        raise ValueError(f"{path}: not a DVOL1 file")
    d, w, h, s0, s1, s2, code = struct.unpack_from("<3I3fB", raw, 6)
    if code not in _DTYPE_CODES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPE_CODES[code]
    expected = 31 + d * w * h * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: payload size {len(raw) - 31}, expected {expected - 31}")
    data = np.frombuffer(raw, dtype=dtype, offset=31).reshape(d, w, h).copy()
    return Volume(data=data, spacing=(s0, s1, s2))
