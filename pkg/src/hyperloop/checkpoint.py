"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"HLTC"  u32 version
    u32 n    config document (UTF-8 JSON, sorted keys), n bytes
    u32 k    k tensor records
    u32 j    j optimizer records

A record is ``u32 name_len, name bytes, u8 dtype code, u8 rank,
rank x u32 dims, payload``. The payload is the C-order little-endian array.
For packed int4 (code 4) the dims are the logical ``(rows, cols)`` and the
payload holds ``rows * ceil(cols / 2)`` bytes, low nibble = even column.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

MAGIC = b"HLTC"
VERSION = 1

F32, F64, I64, U8, INT4 = 0, 1, 2, 3, 4
_CODES = {np.dtype("<f4"): F32, np.dtype("<f8"): F64, np.dtype("<i8"): I64, np.dtype("u1"): U8}
_DTYPES = {F32: np.dtype("<f4"), F64: np.dtype("<f8"), I64: np.dtype("<i8"), U8: np.dtype("u1")}


@dataclass
class PackedInt4:
    """Two 4-bit codes per byte for a ``(rows, cols)`` code matrix."""

    packed: np.ndarray  # (rows, ceil(cols / 2)) uint8
    cols: int

    @property
    def shape(self) -> tuple[int, int]:
        return (self.packed.shape[0], self.cols)

    def __eq__(self, other) -> bool:
        return isinstance(other, PackedInt4) and self.cols == other.cols and np.array_equal(self.packed, other.packed)


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray | PackedInt4] = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION


def _write_record(buf, name: str, arr) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    if isinstance(arr, PackedInt4):
        rows, cols = arr.shape
        buf.write(struct.pack("<BB", INT4, 2))
        buf.write(struct.pack("<II", rows, cols))
        buf.write(np.ascontiguousarray(arr.packed, dtype=np.uint8).tobytes())
        return
    a = np.asarray(arr)
    dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
    code = _CODES.get(np.dtype(dt))
    if code is None:
        raise CheckpointError(f"{name}: unsupported dtype {a.dtype}")
    buf.write(struct.pack("<BB", code, a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())


def _write_section(buf, records: dict) -> None:
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        _write_record(buf, name, arr)


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    doc = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(doc)))
    buf.write(doc)
    _write_section(buf, ckpt.tensors)
    _write_section(buf, ckpt.optimizer)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_section(r: _Reader) -> dict:
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        code, rank = r.unpack("<BB")
        dims = r.unpack(f"<{rank}I") if rank else ()
        if code == INT4:
            if rank != 2:
                raise CheckpointError(f"{name}: packed int4 needs rank 2")
            rows, cols = dims
            width = (cols + 1) // 2
            packed = np.frombuffer(r.take(rows * width), dtype=np.uint8).reshape(rows, width).copy()
            out[name] = PackedInt4(packed, cols)
            continue
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dt = _DTYPES[code]
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(r.take(size * dt.itemsize), dtype=dt).reshape(dims).copy()
    return out


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    try:
        config = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad config document: {exc}") from None
    tensors = _read_section(r)
    optimizer = _read_section(r)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes")
    return Checkpoint(config, tensors, optimizer, version)


def save(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Write atomically: a temporary file in the same directory, then rename."""
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(ckpt))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            return loads(fh.read())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such checkpoint") from None
