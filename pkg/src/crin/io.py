"""Raster and tensor file formats.

Binary PPM (P6) carries RGB images, binary PGM (P5) carries masks (0
background, 255 foreground).  RTEN is a zero-dependency raw tensor format:
magic ``RTEN``, u32 LE version 1, u8 dtype (0=f32, 1=f64), u8 ndim, ndim x
u64 LE dims, then the little-endian payload."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


class RasterError(ValueError):
    """Malformed header, truncated payload, or contract-violating pixel."""


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

def _read_netpbm(data: bytes, path) -> tuple[bytes, int, int, int]:
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise RasterError(f"{path}: not a binary PGM/PPM (bad magic at byte 0)")
    magic = data[:2]
    # header tokens: magic, width, height, maxval; '#' comments allowed
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise RasterError(f"{path}: truncated header at byte {start}")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise RasterError(f"{path}: non-numeric header token") from None
    if maxval != 255:
        raise RasterError(f"{path}: unsupported maxval {maxval} (need 255)")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = data[pos:pos + need]
    if len(payload) != need:
        raise RasterError(
            f"{path}: truncated payload at byte {pos + len(payload)} "
            f"(expected {need} bytes)")
    return payload, width, height, channels


def load_ppm(path) -> np.ndarray:
    """Load a P6 RGB raster as uint8 (3, H, W)."""
    data = Path(path).read_bytes()
    payload, w, h, c = _read_netpbm(data, path)
    if c != 3:
        raise RasterError(f"{path}: expected P6 (RGB), got P5")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1).copy()


def save_ppm(arr: np.ndarray, path) -> None:
    """Write uint8 (3, H, W) as binary P6."""
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[0] != 3 or arr.dtype != np.uint8:
        raise RasterError(f"save_ppm expects uint8 (3, H, W), got "
                          f"{arr.dtype} {arr.shape}")
    _, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(arr.transpose(1, 2, 0).tobytes())


def load_pgm(path) -> np.ndarray:
    """Load a P5 grayscale raster as uint8 (H, W)."""
    data = Path(path).read_bytes()
    payload, w, h, c = _read_netpbm(data, path)
    if c != 1:
        raise RasterError(f"{path}: expected P5 (grayscale), got P6")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def save_pgm(arr: np.ndarray, path) -> None:
    """Write uint8 (H, W) as binary P5."""
    arr = np.asarray(arr)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise RasterError(f"save_pgm expects uint8 (H, W), got {arr.dtype} {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(arr.tobytes())


def load_mask(path) -> np.ndarray:
    """Load a binary mask PGM; 255 maps to 1, 0 to 0, anything else rejected."""
    raw = load_pgm(path)
    bad = (raw != 0) & (raw != 255)
    if bad.any():
        idx = np.argwhere(bad)[0]
        raise RasterError(
            f"{path}: mask pixel at (row {idx[0]}, col {idx[1]}) has value "
            f"{int(raw[tuple(idx)])}, expected 0 or 255")
    return (raw == 255).astype(np.uint8)


def save_mask(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask)
    save_pgm((mask > 0).astype(np.uint8) * 255, path)


# ---------------------------------------------------------------------------
# RTEN
# ---------------------------------------------------------------------------

_RTEN_MAGIC = b"RTEN"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def rten_encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise RasterError(f"RTEN supports f32/f64 only, got {arr.dtype}")
    head = _RTEN_MAGIC + struct.pack("<IBB", 1, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr).astype(_DTYPES[code]).tobytes()


def rten_decode(data: bytes, offset: int = 0, path="<bytes>") -> tuple[np.ndarray, int]:
    """Decode one RTEN blob starting at ``offset``; returns (array, next offset)."""
    if data[offset:offset + 4] != _RTEN_MAGIC:
        raise RasterError(f"{path}: bad RTEN magic at byte {offset}")
    if len(data) < offset + 10:
        raise RasterError(f"{path}: truncated RTEN header at byte {offset}")
    version, code, ndim = struct.unpack_from("<IBB", data, offset + 4)
    if version != 1:
        raise RasterError(f"{path}: unsupported RTEN version {version} at byte {offset + 4}")
    if code not in _DTYPES:
        raise RasterError(f"{path}: unknown RTEN dtype code {code} at byte {offset + 8}")
    pos = offset + 10
    if len(data) < pos + 8 * ndim:
        raise RasterError(f"{path}: truncated RTEN dims at byte {pos}")
    shape = struct.unpack_from(f"<{ndim}Q", data, pos)
    pos += 8 * ndim
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    need = count * dtype.itemsize
    if len(data) < pos + need:
        raise RasterError(f"{path}: truncated RTEN payload at byte {len(data)} "
                          f"(expected {pos + need} bytes)")
    arr = np.frombuffer(data[pos:pos + need], dtype=dtype).reshape(shape).copy()
    return arr, pos + need


def save_rten(arr: np.ndarray, path) -> None:
    Path(path).write_bytes(rten_encode(arr))


def load_rten(path) -> np.ndarray:
    data = Path(path).read_bytes()
    arr, end = rten_decode(data, 0, path)
    if end != len(data):
        raise RasterError(f"{path}: {len(data) - end} trailing bytes after payload")
    return arr
