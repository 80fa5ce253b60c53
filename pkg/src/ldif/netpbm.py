"""Binary PGM/PPM image files and the float <-> 8-bit value mapping.

Images in memory are float arrays in [-1, 1]; on disk they are 8-bit
netpbm files. The quantization grid is fixed here so that a round trip
through ``float_to_u8`` / ``u8_to_float`` is lossless for values already
on the grid.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
import torch

__all__ = [
    "float_to_u8",
    "u8_to_float",
    "write_pgm",
    "read_pgm",
    "write_ppm",
    "read_ppm",
    "save_image",
    "load_image",
]


def float_to_u8(x: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to 0..255, rounding half away from zero."""
    x = np.asarray(x, dtype=np.float64)
    scaled = (np.clip(x, -1.0, 1.0) + 1.0) * 127.5
    return np.floor(scaled + 0.5).astype(np.uint8)


def u8_to_float(q: np.ndarray) -> np.ndarray:
    """Inverse of ``float_to_u8`` onto the 256-value grid in [-1, 1]."""
    q = np.asarray(q)
    if q.dtype != np.uint8:
        raise ValueError(f"expected uint8 data, got {q.dtype}")
    return q.astype(np.float64) / 127.5 - 1.0


def _write_netpbm(path, magic: bytes, data: np.ndarray, depth: int) -> None:
    if data.dtype != np.uint8:
        raise ValueError(f"expected uint8 data, got {data.dtype}")
    h, w = data.shape[:2]
    header = b"%s\n%d %d\n255\n" % (magic, w, h)
    Path(path).write_bytes(header + data.tobytes())


_HEADER_RE = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _HEADER_RE.match(raw)
    if m is None or m.group(1) != magic:
        raise ValueError(f"{path}: not a binary {magic.decode()} file")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    body = raw[m.end():]
    n = w * h * channels
    if len(body) < n:
        raise ValueError(f"{path}: truncated pixel data ({len(body)} < {n} bytes)")
    flat = np.frombuffer(body[:n], dtype=np.uint8)
    shape = (h, w) if channels == 1 else (h, w, channels)
    return flat.reshape(shape).copy()


def write_pgm(path, data: np.ndarray) -> None:
    """Write a (H, W) uint8 array as a binary PGM (P5) file."""
    if data.ndim != 2:
        raise ValueError(f"PGM data must be (H, W), got shape {data.shape}")
    _write_netpbm(path, b"P5", data, 1)


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) file into a (H, W) uint8 array."""
    return _read_netpbm(path, b"P5", 1)


def write_ppm(path, data: np.ndarray) -> None:
    """Write a (H, W, 3) uint8 array as a binary PPM (P6) file."""
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"PPM data must be (H, W, 3), got shape {data.shape}")
    _write_netpbm(path, b"P6", data, 3)


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6) file into a (H, W, 3) uint8 array."""
    return _read_netpbm(path, b"P6", 3)


def save_image(path, img) -> None:
    """Write a (3, H, W) image tensor/array in [-1, 1] as a PPM file."""
    arr = img.detach().cpu().numpy() if hasattr(img, "detach") else np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"image must be (3, H, W), got shape {arr.shape}")
    write_ppm(path, float_to_u8(np.moveaxis(arr, 0, -1)))


def load_image(path) -> torch.Tensor:
    """Read a PPM file as a float32 (3, H, W) tensor in [-1, 1]."""
    arr = u8_to_float(read_ppm(path))
    return torch.from_numpy(np.moveaxis(arr, -1, 0).copy()).to(torch.float32)
