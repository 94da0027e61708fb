"""SMBC checkpoint format.

Layout (little-endian)::

    b"SMBC" | u32 version | u32 meta_len | meta (UTF-8 JSON)
    u32 n_params  | n_params  x entry        # model parameters
    u32 n_buffers | n_buffers x entry        # optimizer momentum buffers

    entry: u16 name_len | name (UTF-8) | u8 ndim | u32[ndim] shape | f32[prod(shape)]

``meta`` holds the network and training configs, the iteration counter and
the best-metric record.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SMBC"
VERSION = 1


@dataclass
class Checkpoint:
    net_config: dict
    train_config: dict
    params: "OrderedDict[str, np.ndarray]"
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    iteration: int = 0
    best: dict = field(default_factory=dict)

    @property
    def meta(self) -> dict:
        return {
            "net_config": self.net_config,
            "train_config": self.train_config,
            "iteration": self.iteration,
            "best": self.best,
        }


def _write_table(f, table: dict) -> None:
    f.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def save(ckpt: Checkpoint, path) -> None:
    """Write atomically; a failed write leaves no partial file behind."""
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    try:
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", VERSION, len(meta)))
            f.write(meta)
            _write_table(f, ckpt.params)
            _write_table(f, ckpt.buffers)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"truncated while reading {what}: need {n} bytes, {len(self.blob) - self.pos} left",
                self.pos,
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def table(self, what: str) -> "OrderedDict[str, np.ndarray]":
        (count,) = self.unpack("<I", f"{what} count")
        out = OrderedDict()
        for _ in range(count):
            (n,) = self.unpack("<H", "name length")
            name = self.take(n, "name").decode()
            (ndim,) = self.unpack("<B", f"{name} rank")
            shape = self.unpack(f"<{ndim}I", f"{name} shape") if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            payload = self.take(4 * size, f"{name} payload")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        return out


def load(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad checkpoint magic, expected b'SMBC'", 0)
    version, meta_len = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    meta = json.loads(r.take(meta_len, "metadata").decode())
    params = r.table("parameter")
    buffers = r.table("buffer")
    if r.pos != len(r.blob):
        raise FormatError(f"{len(r.blob) - r.pos} trailing bytes", r.pos)
    return Checkpoint(meta["net_config"], meta["train_config"], params, buffers,
                      meta["iteration"], meta["best"])
