"""Binary checkpoints.

Layout (little-endian)::

    b"LCNF"  u32 version  32-byte config hash  u32 block count
    per block: u32 byte length, then
        u16 name length, name (utf-8), u8 ndim, ndim x u32 shape, float32 values

Blocks follow the field's parameter declaration order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import DatasetError

MAGIC = b"LCNF"
VERSION = 1


def encode_checkpoint(config_hash: bytes, params) -> bytes:
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    out = [MAGIC, struct.pack("<I", VERSION), config_hash, struct.pack("<I", len(params))]
    for p in params:
        name = p.name.encode()
        shape = p.values.shape
        block = b"".join([
            struct.pack("<H", len(name)), name,
            struct.pack("<B", len(shape)), struct.pack(f"<{len(shape)}I", *shape),
            np.ascontiguousarray(p.values, dtype="<f4").tobytes(),
        ])
        out.append(struct.pack("<I", len(block)))
        out.append(block)
    return b"".join(out)


def decode_checkpoint(blob: bytes):
    """Return ``(config_hash, [(name, array), ...])``."""
    if blob[:4] != MAGIC:
        raise DatasetError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DatasetError(f"unsupported checkpoint version {version}")
    config_hash = blob[8:40]
    (count,) = struct.unpack_from("<I", blob, 40)
    pos = 44
    blocks = []
    for _ in range(count):
        (length,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        block = blob[pos:pos + length]
        pos += length
        (nlen,) = struct.unpack_from("<H", block, 0)
        name = block[2:2 + nlen].decode()
        (ndim,) = struct.unpack_from("<B", block, 2 + nlen)
        shape = struct.unpack_from(f"<{ndim}I", block, 3 + nlen)
        data = np.frombuffer(block, dtype="<f4", offset=3 + nlen + 4 * ndim)
        blocks.append((name, data.reshape(shape)))
    if pos != len(blob):
        raise DatasetError("trailing bytes after checkpoint blocks")
    return config_hash, blocks


def save_checkpoint(path, config_hash: bytes, params) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_checkpoint(config_hash, params))


def load_into(path, config_hash: bytes, params) -> None:
    """Copy checkpoint values into ``params`` after checking hash, names and shapes."""
    stored_hash, blocks = decode_checkpoint(Path(path).read_bytes())
    if stored_hash != config_hash:
        raise DatasetError("checkpoint was written for a different model configuration")
    if len(blocks) != len(params):
        raise DatasetError(f"checkpoint has {len(blocks)} blocks, model has {len(params)} parameters")
    for (name, data), p in zip(blocks, params):
        if name != p.name or data.shape != p.values.shape:
            raise DatasetError(f"checkpoint block {name}{data.shape} does not match {p.name}{p.values.shape}")
        p.values[...] = data
