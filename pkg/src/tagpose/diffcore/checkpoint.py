"""Named-tensor checkpoint files.

Layout (all little-endian)::

    b"TGCK"  uint32 version  uint32 tensor_count
    per tensor: uint16 name_length, UTF-8 name, uint32 ndim, uint64 dims[ndim]
    then every tensor's float64 values, in header order, row-major
"""
import struct
from pathlib import Path

import numpy as np

from ..errors import SchemaError

_MAGIC = b"TGCK"
_VERSION = 1


def save_tensors(path, tensors):
    """Write an ordered mapping ``name -> array`` to ``path``."""
    header = [_MAGIC, struct.pack("<II", _VERSION, len(tensors))]
    body = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw)
        header.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        body.append(arr.tobytes())
    Path(path).write_bytes(b"".join(header + body))


def load_tensors(path):
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise SchemaError("not a checkpoint file (bad magic)", path=str(path))
    version, count = struct.unpack("<II", raw[4:12])
    if version != _VERSION:
        raise SchemaError(f"unsupported checkpoint version {version}", path=str(path))
    off = 12
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", raw[off:off + 2])
        name = raw[off + 2:off + 2 + nlen].decode("utf-8")
        off += 2 + nlen
        (ndim,) = struct.unpack("<I", raw[off:off + 4])
        shape = struct.unpack(f"<{ndim}Q", raw[off + 4:off + 4 + 8 * ndim])
        off += 4 + 8 * ndim
        entries.append((name, shape))
    out = {}
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(raw[off:off + 8 * n], dtype="<f8").reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(raw):
        raise SchemaError(f"{len(raw) - off} trailing bytes in checkpoint", path=str(path))
    return out
