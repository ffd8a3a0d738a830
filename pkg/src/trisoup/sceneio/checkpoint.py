"""Checkpoint container.

Layout (all little-endian):

    8 bytes   magic  b"TRISOUP\\0"
    4 bytes   uint32 format version (currently 1)
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header: {"meta": {...}, "arrays": [[name, dtype, shape], ...]}
    ...       raw C-order array payloads, in header order

Nothing time-dependent is written, so identical state gives identical bytes.
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"TRISOUP\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_arrays(path, arrays: dict, meta: dict | None = None):
    names = list(arrays)
    entries = []
    blobs = []
    for k in names:
        a = np.ascontiguousarray(arrays[k])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        entries.append([k, a.dtype.str, list(a.shape)])
        blobs.append(a.tobytes(order="C"))
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def read_arrays(path) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a trisoup checkpoint")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 20
    header = json.loads(data[off:off + hlen].decode())
    off += hlen
    arrays = {}
    for name, dt, shape in header["arrays"]:
        dtype = np.dtype(dt)
        n = int(np.prod(shape)) * dtype.itemsize
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arrays[name] = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape).copy()
        off += n
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return arrays, header["meta"]
