"""Flat binary parameter container.

Layout (little-endian)::

    b"IMCW" | version u32 | entry count u32 |
    per entry: name length u32 | UTF-8 name | rank u32 | dims u32 * rank | float32 data
"""
import struct

import numpy as np

from imcnet.errors import CheckpointError

MAGIC = b"IMCW"
VERSION = 1


def dumps(state):
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(blob):
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            nbytes = 4 * size
            if pos + nbytes > len(blob):
                raise CheckpointError(f"truncated data for entry {name!r}")
            state[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last entry")
    return state


def save(path, state):
    with open(path, "wb") as fh:
        fh.write(dumps(state))


def load(path):
    try:
        with open(path, "rb") as fh:
            return loads(fh.read())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
