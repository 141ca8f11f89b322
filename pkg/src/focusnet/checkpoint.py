"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    b"FNET" | version | header_len | header (UTF-8 key = value text)
    | tensor_count | tensor*

    tensor := name_len | name | rank | dim*rank | float32-LE * prod(dims)

The header holds the ArchConfig followed by ``best_val_loss`` (as a hex float
so it round-trips exactly) and ``epoch``.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .exceptions import BadMagicError, CheckpointError, TruncatedCheckpointError, VersionMismatchError
from .model import ArchConfig, build

MAGIC = b"FNET"
VERSION = 1
_U32 = struct.Struct("<I")


def encode_checkpoint(rec) -> bytes:
    header = rec.params.cfg.to_text() + f"best_val_loss = {float(rec.best_val_loss).hex()}\nepoch = {int(rec.epoch)}\n"
    header_bytes = header.encode("utf-8")
    arrays = rec.params.state_arrays()
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(header_bytes)), header_bytes, _U32.pack(len(arrays))]
    for name, arr in arrays.items():
        raw_name = name.encode("utf-8")
        parts += [_U32.pack(len(raw_name)), raw_name, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(rec, path) -> None:
    """Write atomically (temp file + rename) so a reader never sees a partial file."""
    path = Path(path)
    data = encode_checkpoint(rec)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str, tensor=None) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated while reading {what}" + (f" of tensor '{tensor}'" if tensor else ""),
                tensor_name=tensor,
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what, tensor=None) -> int:
        return _U32.unpack(self.take(4, what, tensor))[0]


def decode_checkpoint(data: bytes):
    from .training import CheckpointRecord

    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r.pos = 4
    version = r.u32("version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader supports {VERSION}")
    header = r.take(r.u32("header length"), "header").decode("utf-8")
    meta, arch_lines = {}, []
    for line in header.splitlines():
        key = line.partition("=")[0].strip()
        if key in ("best_val_loss", "epoch"):
            meta[key] = line.partition("=")[2].strip()
        else:
            arch_lines.append(line)
    try:
        cfg = ArchConfig.from_text("\n".join(arch_lines))
        best = float.fromhex(meta["best_val_loss"])
        epoch = int(meta["epoch"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc

    arrays = {}
    count = r.u32("tensor count")
    for i in range(count):
        name = r.take(r.u32("name length", f"#{i}"), "name", f"#{i}").decode("utf-8")
        rank = r.u32("rank", name)
        dims = tuple(r.u32("dims", name) for _ in range(rank))
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        raw = r.take(4 * n, "values", name)
        arrays[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last tensor")

    params = build(cfg, 0)
    params.load_arrays(arrays)
    return CheckpointRecord(params, best, epoch)


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
