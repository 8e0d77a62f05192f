"""MTE1 binary array container and JSON manifests.

Layout: b"MTE1", little-endian u32 ndim, ndim little-endian u64 dims,
then the float64 little-endian payload in C order.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MTE1"


class FormatError(ValueError):
    pass


def dumps_array(a):
    a = np.asarray(a, dtype="<f8")
    header = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + a.tobytes(order="C")


def loads_array(buf):
    buf = bytes(buf)
    if buf[:4] != MAGIC:
        raise FormatError("bad magic, not an MTE1 container")
    if len(buf) < 8:
        raise FormatError("truncated header")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 8 * ndim
    if len(buf) < off:
        raise FormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 8)
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(buf) != off + 8 * count:
        raise FormatError(f"payload has {len(buf) - off} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", offset=off, count=count).reshape(dims).astype(np.float64)


def save_array(path, a):
    Path(path).write_bytes(dumps_array(a))


def load_array(path):
    return loads_array(Path(path).read_bytes())


def save_manifest(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def load_manifest(path):
    return json.loads(Path(path).read_text())
