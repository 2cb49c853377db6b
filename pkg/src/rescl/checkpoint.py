"""Named-tensor checkpoint files ("RCLN").

Layout, all little-endian::

    b"RCLN" | version:u32 | count:u32
    repeated count times:
        name_len:u32 | name:utf-8 | dtype:u8 | rank:u32 | dims:u64*rank | raw data

Metadata (architecture, heads, kind) travels as a uint8 tensor holding JSON
under the name ``meta.json``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"RCLN"
VERSION = 1

DTYPE_TAGS = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
    3: np.dtype("<i8"),
    4: np.dtype("<u2"),
}
_TAG_OF = {dt: tag for tag, dt in DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        tag = _TAG_OF.get(arr.dtype.newbyteorder("<"))
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic; not an RCLN checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = DTYPE_TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(take(nbytes), dtype=dt).reshape(dims).copy()
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def write_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tensors(tensors))
    os.replace(tmp, path)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def meta_tensor(meta: Mapping) -> np.ndarray:
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def read_meta(tensors: Mapping[str, np.ndarray]) -> dict:
    if "meta.json" not in tensors:
        raise CheckpointError("checkpoint has no meta.json tensor")
    return json.loads(tensors["meta.json"].tobytes().decode("utf-8"))
