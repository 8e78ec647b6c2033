"""Binary array container shared by every stage.

Layout (little-endian): magic ``CFLW``, u32 format version, u32 array count,
then per array: u32 name length, UTF-8 name, u32 rank, u64 per dimension,
raw f64 data in row-major order.
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CFLW"
VERSION = 1
STAGE_KEY = "__stage__"


class CheckpointError(ValueError):
    pass


def dumps(arrays, stage=None):
    items = list(arrays.items())
    if stage is not None:
        items.insert(0, (f"{STAGE_KEY}:{stage}", np.zeros(0)))
    buf = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        buf.append(struct.pack("<I", len(raw)))
        buf.append(raw)
        buf.append(struct.pack("<I", arr.ndim))
        buf.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.append(arr.tobytes())
    return b"".join(buf)


def loads(blob, stage=None):
    """Parse a checkpoint; verifies the stage tag when ``stage`` is given."""
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic bytes, not a CFLW checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    arrays = {}
    found_stage = None
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            data = np.frombuffer(blob, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            if name.startswith(STAGE_KEY + ":"):
                found_stage = name.split(":", 1)[1]
                continue
            arrays[name] = data.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last array")
    if stage is not None and found_stage != stage:
        raise CheckpointError(f"expected stage {stage!r}, found {found_stage!r}")
    return arrays


def save(path, arrays, stage=None):
    Path(path).write_bytes(dumps(arrays, stage))


def load(path, stage=None):
    return loads(Path(path).read_bytes(), stage)


def dump_stream_matrix(tokens):
    """u32 frame count, u32 stream count, then the grid as u16."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError("stream matrix must be 2-D")
    if tokens.size and (tokens.min() < 0 or tokens.max() > 0xFFFF):
        raise ValueError("token ids must fit in u16")
    f, q = tokens.shape
    return struct.pack("<II", f, q) + tokens.astype("<u2").tobytes()


def load_stream_matrix(blob):
    f, q = struct.unpack_from("<II", blob, 0)
    if len(blob) != 8 + 2 * f * q:
        raise ValueError("stream matrix size does not match its header")
    return np.frombuffer(blob, dtype="<u2", offset=8).reshape(f, q).astype(np.int64)
