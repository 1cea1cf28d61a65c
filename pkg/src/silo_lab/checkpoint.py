"""Binary checkpoint container shared by every trained artifact.

Layout (all integers little-endian)::

    b"SILO"  u32 version
    u32 n_meta   { u32 len, utf-8 key, u32 len, utf-8 value } * n_meta
    u32 n_arrays { u32 len, utf-8 name, u8 dtype (1 = f64), u32 ndim,
                   u64 dim * ndim, f64 payload (C order) } * n_arrays

Readers reject any version they do not know instead of guessing.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SILO"
VERSION = 1
_F64 = 1


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint."""


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)


def _put_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def dumps(ckpt: Checkpoint, version: int = VERSION) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", version))
    buf.write(struct.pack("<I", len(ckpt.meta)))
    for key, value in ckpt.meta.items():
        _put_str(buf, str(key))
        _put_str(buf, str(value))
    buf.write(struct.pack("<I", len(ckpt.arrays)))
    for name, arr in ckpt.arrays.items():
        a = np.asarray(arr, dtype="<f8", order="C")
        _put_str(buf, name)
        buf.write(struct.pack("<BI", _F64, a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.source}: truncated checkpoint (wanted {n} bytes at offset {self.pos})")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{self.source}: corrupt string at offset {self.pos}") from exc


def loads(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(raw, source)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{source}: not a SILO checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (this build reads version {VERSION})")
    ckpt = Checkpoint()
    (n_meta,) = r.unpack("<I")
    for _ in range(n_meta):
        key = r.string()
        ckpt.meta[key] = r.string()
    (n_arr,) = r.unpack("<I")
    for _ in range(n_arr):
        name = r.string()
        dtype, ndim = r.unpack("<BI")
        if dtype != _F64:
            raise CheckpointError(f"{source}: array {name!r} has unknown dtype code {dtype}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)
        ckpt.arrays[name] = data.reshape(shape)
    if r.pos != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - r.pos} trailing bytes after last array")
    return ckpt


def save(ckpt: Checkpoint, path: str | Path) -> None:
    """Write atomically (temp file + rename) so readers never see half a file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(dumps(ckpt))
    os.replace(tmp, path)


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return loads(path.read_bytes(), str(path))
