"""Flat binary parameter checkpoints.

Layout: magic ``PSLB``, version u32, then one record per parameter:
u32 name length, utf-8 name, u32 rank, u32 extents, raw 32-bit
little-endian values.  Round-trips are bit-exact for float32 data.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ParseError
from .tensorcore import Tensor

MAGIC = b"PSLB"
VERSION = 1


def save_checkpoint(params, path):
    """Write ``params`` (mapping name -> Tensor or ndarray) to ``path``."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name in params:
            value = params[name]
            data = value.data if isinstance(value, Tensor) else np.asarray(value)
            data = np.ascontiguousarray(data, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            for extent in data.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(data.tobytes())


def load_checkpoint(path):
    """Read a checkpoint into an ordered dict of float32 arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def fail(msg, offset):
        raise ParseError(f"{path}: {msg}", offset)

    if blob[:4] != MAGIC:
        fail(f"bad magic {blob[:4]!r}", 0)
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        fail(f"unsupported version {version}", 4)

    params = {}
    offset = 8
    while offset < len(blob):
        try:
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            end = offset + 4 * count
            if end > len(blob):
                fail("truncated data record", offset)
            data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            offset = end
        except struct.error:
            fail("truncated header record", offset)
        params[name] = data.reshape(shape).copy()
    return params


def assign_params(params, arrays):
    """Copy loaded arrays into an existing name -> Tensor mapping."""
    for name, tensor in params.items():
        if name not in arrays:
            raise ParseError(f"checkpoint missing parameter {name!r}")
        src = arrays[name]
        if tuple(src.shape) != tuple(tensor.shape):
            raise ParseError(
                f"checkpoint shape {src.shape} != expected {tensor.shape} for {name!r}"
            )
        tensor.data = src.astype(tensor.data.dtype)
