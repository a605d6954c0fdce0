"""CDNC checkpoint files.

Layout (little-endian)::

    b"CDNC" | u32 version | u32 count | count x entry     model params + BN buffers
    u32 count | count x entry                             optimizer state (m.*, v.*, t)
    u32 length | UTF-8 JSON                               run metadata

    entry := u16 name_len | name | 4 x u32 shape | f32 data

Shapes are left-padded to rank 4; loaders reshape to the model's own shapes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import read_tensor_frame, write_tensor_frame

MAGIC = b"CDNC"
VERSION = 1


@dataclass
class Checkpoint:
    model: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _write_entries(fh, entries: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        write_tensor_frame(fh, np.asarray(arr, dtype=np.float32))


def _read_entries(fh) -> dict[str, np.ndarray]:
    head = fh.read(4)
    if len(head) != 4:
        raise ValueError("truncated checkpoint section")
    (count,) = struct.unpack("<I", head)
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", fh.read(2))
        name = fh.read(n).decode("utf-8")
        out[name] = read_tensor_frame(fh)
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_entries(fh, ckpt.model)
        _write_entries(fh, ckpt.optimizer)
        meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a CDNC checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        model = _read_entries(fh)
        optimizer = _read_entries(fh)
        head = fh.read(4)
        meta = {}
        if len(head) == 4:
            (n,) = struct.unpack("<I", head)
            meta = json.loads(fh.read(n).decode("utf-8"))
    return Checkpoint(model, optimizer, meta)
