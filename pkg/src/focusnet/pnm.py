"""Binary 8-bit PGM (P5) and PPM (P6) reading and writing.

Arrays are uint8, shaped H x W for PGM and H x W x 3 for PPM.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .exceptions import DataError

_WHITESPACE = b" \t\r\n"


def _tokens(data: bytes, count: int):
    """Read ``count`` header tokens, skipping '#' comments; returns (tokens, offset)."""
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i] in _WHITESPACE:
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and data[i] not in _WHITESPACE and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise DataError("truncated PNM header")
        tokens.append(data[start:i])
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def decode_pnm(data: bytes, source="<bytes>") -> np.ndarray:
    try:
        (magic, w, h, maxval), offset = _tokens(data, 4)
        width, height, maxval = int(w), int(h), int(maxval)
    except (DataError, ValueError) as exc:
        raise DataError(f"{source}: malformed PNM header ({exc})") from exc
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise DataError(f"{source}: unsupported PNM type {magic!r} (only binary P5/P6)")
    if not 0 < maxval < 256:
        raise DataError(f"{source}: only 8-bit PNM is supported, maxval={maxval}")
    size = width * height * channels
    raster = data[offset:offset + size]
    if len(raster) != size:
        raise DataError(f"{source}: raster truncated ({len(raster)} of {size} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    if maxval != 255:
        if arr.max(initial=0) > maxval:
            raise DataError(f"{source}: sample value above maxval {maxval}")
        # rescale to the full 8-bit range, rounding half up
        arr = ((arr.astype(np.uint32) * 510 + maxval) // (2 * maxval)).astype(np.uint8)
    return arr[:, :, 0].copy() if channels == 1 else arr.copy()


def read_pnm(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    return decode_pnm(data, source=str(path))


def encode_pnm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise DataError(f"PNM data must be uint8, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"cannot encode array of shape {arr.shape} as PGM/PPM")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def write_pnm(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(arr))
