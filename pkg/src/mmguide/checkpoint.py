"""Flat parameter archive.

Layout (little-endian)::

    magic   b"MMCK"
    u32     format version (1)
    u32     record count
    record* u16 path length, UTF-8 path, u8 ndim, u32 * ndim dims,
            float32 payload (row-major)

Every tensor in a module's ``state_dict`` is stored, including normalization
running statistics; integer buffers are stored as float32 and cast back on load.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from ._io import atomic_write_bytes

MAGIC = b"MMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_state(state: dict) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for path, tensor in state.items():
        name = path.encode("utf-8")
        arr = tensor.detach().cpu().numpy().astype("<f4")
        chunks.append(struct.pack("<H", len(name)) + name)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode_state(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        out = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            path = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"truncated payload for {path}")
            out[path] = np.frombuffer(buf, "<f4", size, pos).reshape(dims).copy()
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last record")
    return out


def save_checkpoint(module: torch.nn.Module, path) -> None:
    atomic_write_bytes(Path(path), encode_state(module.state_dict()))


def load_checkpoint(module: torch.nn.Module, path) -> None:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    records = decode_state(path.read_bytes())
    state = module.state_dict()
    missing = set(state) - set(records)
    unexpected = set(records) - set(state)
    if missing or unexpected:
        raise CheckpointError(f"parameter paths differ (missing {sorted(missing)[:3]}, unexpected {sorted(unexpected)[:3]})")
    new_state = OrderedDict()
    for key, ref in state.items():
        arr = records[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{key}: shape {arr.shape} does not match model {tuple(ref.shape)}")
        new_state[key] = torch.from_numpy(arr).to(ref.dtype)
    module.load_state_dict(new_state)
