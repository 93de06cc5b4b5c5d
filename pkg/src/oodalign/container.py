"""Binary container for named float64 tensors.

Layout (all integers little-endian, payloads little-endian float64):

    magic "ALOD" | u32 version | u32 entry count |
    per entry: u32 name length | name utf8 | u32 rank | u32 * rank dims | f64 * n data

Model checkpoints and optimizer-state sidecars both use this container.
Read errors report the byte offset at which the file stopped making sense.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"ALOD"
VERSION = 1


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


class ByteReader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.path = path
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise DataError(
                f"{self.path}: truncated while reading {what} at byte {self.offset} "
                f"(need {n} more bytes, have {len(self.blob) - self.offset})"
            )
        chunk = self.blob[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    cur = ByteReader(blob, str(path))
    magic = cur.take(4, "magic")
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    version = cur.u32("version")
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    count = cur.u32("entry count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = cur.u32("name length")
        name = cur.take(name_len, "entry name").decode("utf-8")
        rank = cur.u32(f"rank of {name!r}")
        if rank > 8:
            raise DataError(f"{path}: implausible rank {rank} for {name!r} at byte {cur.offset - 4}")
        dims = struct.unpack(f"<{rank}I", cur.take(4 * rank, f"dims of {name!r}"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = cur.take(8 * n, f"data of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if cur.offset != len(cur.blob):
        raise DataError(f"{path}: {len(cur.blob) - cur.offset} trailing bytes at byte {cur.offset}")
    return tensors
