"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"BVFG1"  u32 version
    u32 epoch  u64 step
    u32 n_params   then n_params tensor records
    u32 n_buffers  then n_buffers tensor records (momentum, keyed by parameter name)
    u32 len + UTF-8 JSON of the RNG state
    u32 len + UTF-8 JSON of the config

A tensor record is: u16 name length, UTF-8 name, u8 ndim, ndim x u64 dims,
then the values as float64 ('<f8') in C order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import CheckpointError, IoError

MAGIC = b"BVFG1"
VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    config: Optional[dict] = None

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<IIQ", VERSION, self.epoch, self.step)]
        for table in (self.params, self.buffers):
            out.append(struct.pack("<I", len(table)))
            for name, arr in table.items():
                out.append(_pack_tensor(name, arr))
        for blob in (self.rng_state, self.config):
            text = json.dumps(blob, sort_keys=True).encode("utf-8")
            out.append(struct.pack("<I", len(text)) + text)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[: len(MAGIC)] != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        r = _Reader(data, len(MAGIC))
        version, epoch, step = r.unpack("<IIQ")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        tables = []
        for _ in range(2):
            (n,) = r.unpack("<I")
            tables.append(dict(r.tensor() for _ in range(n)))
        rng_state = r.json()
        config = r.json()
        if r.pos != len(data):
            raise CheckpointError("trailing bytes after checkpoint payload")
        return cls(tables[0], tables[1], rng_state, epoch, step, config)

    def save(self, path) -> None:
        try:
            Path(path).write_bytes(self.to_bytes())
        except OSError as e:
            raise IoError(f"cannot write checkpoint {path}: {e}") from e

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as e:
            raise IoError(f"cannot read checkpoint {path}: {e}") from e
        return cls.from_bytes(data)


def _pack_tensor(name: str, arr) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    key = name.encode("utf-8")
    head = struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


class _Reader:
    def __init__(self, data: bytes, pos: int):
        self.data, self.pos = data, pos

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def tensor(self):
        (n,) = self.unpack("<H")
        name = self.raw(n).decode("utf-8")
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(self.raw(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        return name, arr

    def json(self):
        (n,) = self.unpack("<I")
        try:
            return json.loads(self.raw(n).decode("utf-8"))
        except ValueError as e:
            raise CheckpointError(f"corrupt checkpoint metadata: {e}") from e
