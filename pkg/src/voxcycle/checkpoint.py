"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"VXCG"  u32 version  u32 record_count
    record*: u16 name_len, name (utf-8), u8 dtype_tag, u8 rank,
             rank * u64 dims, payload (C order)

The ``meta`` record is JSON text stored as a u8 array; every other record
is a named tensor.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VXCG"
VERSION = 1

_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i8")}
_TAG_OF = {v: k for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    pass


class CheckpointLengthError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def encode(records: dict[str, np.ndarray], meta: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(records) + 1)]
    items = [("meta", np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype="u1"))]
    items += list(records.items())
    for name, arr in items:
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        tag = _TAG_OF.get(dtype)
        if tag is None:
            raise CheckpointError(f"record {name!r}: unsupported dtype {arr.dtype}")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointLengthError(
                f"checkpoint truncated while reading {what}: need {n} bytes at offset "
                f"{self.pos}, only {len(self.raw) - self.pos} left")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(raw)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
    version, count = r.unpack("<II", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    records = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "record name length")
        name = r.take(n, "record name").decode()
        tag, rank = r.unpack("<BB", f"header of {name}")
        if tag not in _TAGS:
            raise CheckpointError(f"record {name!r}: unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        dtype = _TAGS[tag]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = r.take(size, f"payload of {name}")
        records[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if r.pos != len(raw):
        raise CheckpointLengthError(f"{len(raw) - r.pos} trailing bytes after last record")
    meta_arr = records.pop("meta", None)
    if meta_arr is None:
        raise CheckpointError("checkpoint has no meta record")
    return records, json.loads(meta_arr.tobytes().decode())


def write(path: str | Path, records: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(records, meta))
    tmp.replace(path)


def read(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
