"""Portable weight files (.gprl).

Layout, all little-endian:

    magic   b"GPRL"
    u32     version (1)
    u32     entry count
    per entry:
        u32     name length
        bytes   UTF-8 name
        u8      rank
        u32[]   dims (rank of them)
        f32[]   raw row-major data

Round-trips are bit-exact. Parse failures raise GprlFormatError carrying the
byte offset of the problem.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .nn import ParamStore
from .tensor import Tensor

MAGIC = b"GPRL"
VERSION = 1


class GprlFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def save_weights(store: ParamStore, path) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(store))]
    for name, t in store.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise GprlFormatError(f"truncated while reading {what}", self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def load_weights(path) -> ParamStore:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise GprlFormatError("bad magic", 0)
    version, count = struct.unpack("<II", r.take(8, "header"))
    if version != VERSION:
        raise GprlFormatError(f"unsupported version {version}", 4)
    store = ParamStore()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", r.take(4, "name length"))
        name = r.take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", r.take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        size = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * size, f"data of {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        store.add(name, Tensor(arr.copy(), requires_grad=True))
    return store
