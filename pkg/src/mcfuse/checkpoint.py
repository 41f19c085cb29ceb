"""Binary container for named float64 arrays.

Layout: magic string ``MCFUSE01``, then for each entry
``u32 name_len | name utf-8 | u32 rank | u32 extents[rank] | f64 values``,
all little-endian, values in row-major order. Round-trips are bit-exact,
which the checkpoint and feature-dump tests rely on.
"""

from __future__ import annotations

import struct
from typing import Dict, Mapping

import numpy as np

from .errors import DataError

MAGIC = b"MCFUSE01"


def save_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype=np.float64)
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", a.ndim))
            for ext in a.shape:
                f.write(struct.pack("<I", ext))
            f.write(a.astype("<f8", copy=False).tobytes())


def load_arrays(path) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) < 4:
                raise DataError(f"{path}: truncated entry header")
            (name_len,) = struct.unpack("<I", head)
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(8 * count)
            if len(raw) != 8 * count:
                raise DataError(f"{path}: truncated values for {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return out
