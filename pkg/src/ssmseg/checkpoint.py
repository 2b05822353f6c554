"""Binary checkpoint format for named float tensors.

Layout, all little-endian:

    magic   4 bytes  b"RSSM"
    version u16      currently 1
    then per tensor, in insertion order:
        name_len u16
        name     utf-8 bytes
        dtype    u8       0 = float32, 1 = float64
        rank     u8
        extents  rank x u32
        payload  raw little-endian values, C order

Round trips are bit-exact: the payload is the array's own bytes.
"""
from __future__ import annotations

import struct
from typing import Dict, Mapping, Union

import numpy as np

from .tensor import Tensor

MAGIC = b"RSSM"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint data."""


def save_tensors(path, named: Mapping[str, Union[Tensor, np.ndarray]]) -> None:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    for name, value in named.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        if arr.ndim > 255:
            raise CheckpointError(f"tensor {name!r} rank {arr.ndim} exceeds format limit")
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name!r}")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        for ext in arr.shape:
            chunks.append(struct.pack("<I", ext))
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        chunks.append(np.ascontiguousarray(little).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_tensors(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes for {what} "
                                  f"at byte {pos}, file has {len(buf)}")
        piece = buf[pos:pos + n]
        pos += n
        return piece

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    out: Dict[str, np.ndarray] = {}
    while pos < len(buf):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag} at byte {pos - 2}")
        shape = tuple(struct.unpack("<I", take(4, f"extent of {name!r}"))[0]
                      for _ in range(rank))
        count = 1
        for ext in shape:
            count *= ext
        payload = take(count * _TAG_DTYPES[tag].itemsize, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=_TAG_DTYPES[tag]).reshape(shape)
        out[name] = arr.astype(arr.dtype.newbyteorder("="))
    return out
