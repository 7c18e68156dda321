"""Binary checkpoint container for named float32 tensors.

Layout (all little-endian):

    magic   4 bytes  b"WMK1"
    version u16      currently 1
    count   u32      number of entries
    entry*  u16 name length, UTF-8 name, u8 rank, u32 dims[rank], f32 data

Entries are written sorted by name, so identical state always produces
byte-identical files and a save/load/save cycle is a fixed point.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"WMK1"
VERSION = 1


class CheckpointError(IOError):
    pass


def save(path, named: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(named))]
    for name in sorted(named):
        # note: ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.asarray(named[name], dtype=np.float32, order="C")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f4").tobytes())
    data = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(data)


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 10 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a WMK1 checkpoint (bad magic)")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    named = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off) if rank else ()
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            named[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint: {exc}") from exc
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes after last entry")
    return named


def encode_seed(seed: int) -> np.ndarray:
    """64-bit seed as four 16-bit chunks, each exactly representable in f32."""
    s = int(seed) & ((1 << 64) - 1)
    return np.asarray([(s >> (16 * i)) & 0xFFFF for i in range(4)], dtype=np.float32)


def decode_seed(arr: np.ndarray) -> int:
    chunks = [int(round(float(v))) & 0xFFFF for v in np.asarray(arr).ravel()]
    return sum(c << (16 * i) for i, c in enumerate(chunks))
