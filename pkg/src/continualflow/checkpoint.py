"""Versioned binary checkpoint container.

Layout (little-endian)::

    magic   8 bytes  b"CFLOWCKP"
    version uint32
    meta    uint32 length + UTF-8 JSON (network config and free-form extras)
    count   uint32
    count x [uint16 name length, name, uint8 dtype length, dtype str,
             uint8 ndim, ndim x uint32 dims, raw array bytes]
    crc32   uint32 over everything before it
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError
from .network import ContinualFlowNet, NetConfig

MAGIC = b"CFLOWCKP"
VERSION = 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def encode(tensors: dict, meta: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(_jsonable(meta), sort_keys=True).encode()
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = np.ascontiguousarray(arr, dtype=dt)
        nb, db = name.encode(), dt.str.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", len(db)), db]
        parts += [struct.pack("<B", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes):
    """Return ``(tensors, meta)`` from checkpoint bytes."""
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=len(MAGIC))
    if len(data) < 4 or zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise FormatError("checksum mismatch", offset=max(len(data) - 4, 0))
    (n,) = r.unpack("<I", "metadata length")
    start = r.pos
    try:
        meta = json.loads(r.take(n, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt metadata: {exc}", offset=start) from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (ln,) = r.unpack("<H", "name length")
        name = r.take(ln, "name").decode()
        (ld,) = r.unpack("<B", "dtype length")
        at = r.pos
        try:
            dt = np.dtype(r.take(ld, "dtype").decode())
        except TypeError:
            raise FormatError(f"unknown dtype for {name}", offset=at) from None
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(nbytes, name), dtype=dt).reshape(shape).copy()
    if r.pos != len(data) - 4:
        raise FormatError("trailing bytes after tensors", offset=r.pos)
    return tensors, meta


def save_checkpoint(path, net: ContinualFlowNet, extra: dict | None = None):
    meta = {"config": net.config.to_dict(), "dtype": net.dtype.str, "extra": extra or {}}
    Path(path).write_bytes(encode(net.state_dict(), meta))


def load_checkpoint(path):
    """Rebuild the network stored at ``path``; returns ``(net, extra)``."""
    tensors, meta = decode(Path(path).read_bytes())
    try:
        config = NetConfig.from_dict(meta["config"])
        dtype = np.dtype(meta.get("dtype", "<f4"))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint metadata lacks a usable config: {exc}", offset=0) from None
    net = ContinualFlowNet(config, dtype=dtype)
    net.load_state_dict(tensors)
    return net, meta.get("extra", {})
