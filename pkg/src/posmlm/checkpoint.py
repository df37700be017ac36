"""Checkpoint files.

Layout (all integers little-endian):

    magic      4 bytes  b"PMCK"
    version    u32      1
    meta_len   u32      length of the UTF-8 JSON metadata that follows
    meta       bytes    model/train config, epoch, optimizer step, digests
    n_blocks   u32
    n_blocks times:
        name_len u32, name (UTF-8), ndim u32, ndim x u32 shape,
        prod(shape) little-endian float32 values

Optimizer moments are stored as extra blocks named ``opt/<key>``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path: str | Path, params: dict[str, np.ndarray], meta: dict,
         opt_state: dict[str, np.ndarray] | None = None) -> None:
    blocks = list(params.items()) + [(f"opt/{k}", v) for k, v in (opt_state or {}).items()]
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(meta_raw)))
        f.write(meta_raw)
        f.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks:
            raw_name = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict, dict[str, np.ndarray]]:
    """Returns ``(params, meta, optimizer_state)``; arrays come back as float32."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, meta_len = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n_blocks,) = take("<I")
    params, opt = {}, {}
    for _ in range(n_blocks):
        (name_len,) = take("<I")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        if pos + 4 * count > len(data):
            raise CheckpointError(f"{path}: truncated block {name}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
        if name.startswith("opt/"):
            opt[name[4:]] = arr
        else:
            params[name] = arr
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return params, meta, opt
