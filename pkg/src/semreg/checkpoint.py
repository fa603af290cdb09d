"""Binary weight checkpoints with a strict, versioned, checksummed layout.

Layout: magic ``SGM1``, format version (u32), tensor count (u32), then per
tensor a u32 name length, the UTF-8 name, u32 rank, u32 dims, a u8 dtype
tag (1 = float64), and the row-major little-endian payload.  The file ends
with a CRC32 (u32) of every preceding byte.  All integers little-endian.
"""

from __future__ import annotations

import os
import struct
import zlib
from collections.abc import Mapping

import numpy as np
from numpy.typing import NDArray

from .errors import ChecksumError, FormatError, SchemaError, ValidationError, VersionError

__all__ = ["save_checkpoint", "load_checkpoint", "MAGIC", "FORMAT_VERSION"]

MAGIC = b"SGM1"
FORMAT_VERSION = 1
_DTYPE_F64 = 1


def save_checkpoint(weights: Mapping[str, NDArray[np.float64]], path: str | os.PathLike) -> None:
    """Serialize named float64 tensors; iteration order is preserved on load."""
    if not weights:
        raise ValidationError("refusing to save an empty weight set")
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", FORMAT_VERSION)
    body += struct.pack("<I", len(weights))
    for name, tensor in weights.items():
        # ascontiguousarray would flatten 0-d to (1,); asarray keeps rank
        arr = np.asarray(tensor, dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        body += struct.pack("<I", len(encoded))
        body += encoded
        body += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            body += struct.pack("<I", dim)
        body += struct.pack("<B", _DTYPE_F64)
        body += arr.tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(bytes(body))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.data):
            raise FormatError(
                f"{self.path}: truncated while reading {what} "
                f"(need {count} bytes at offset {self.offset})"
            )
        out = self.data[self.offset : self.offset + count]
        self.offset += count
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def load_checkpoint(
    path: str | os.PathLike,
    expected: Mapping[str, tuple[int, ...]] | None = None,
) -> dict[str, NDArray[np.float64]]:
    """Load and fully validate a checkpoint.

    The trailing CRC32 is checked before anything is parsed, so a truncated
    or corrupted file fails closed.  When ``expected`` maps names to shapes,
    the loaded name set and shapes must match it exactly.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 12:
        raise FormatError(f"{path}: file too short to be a checkpoint")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    actual_crc = zlib.crc32(raw[:-4])
    if stored_crc != actual_crc:
        raise ChecksumError(
            f"{path}: CRC32 mismatch (stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x})"
        )

    reader = _Reader(raw[:-4], str(path))
    if reader.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic; not a checkpoint file")
    version = reader.u32("version")
    if version != FORMAT_VERSION:
        raise VersionError(
            f"{path}: unsupported format version {version} "
            f"(this build reads version {FORMAT_VERSION})"
        )
    count = reader.u32("tensor count")
    weights: dict[str, NDArray[np.float64]] = {}
    for _ in range(count):
        name_len = reader.u32("name length")
        name = reader.take(name_len, "name").decode("utf-8")
        if name in weights:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        rank = reader.u32(f"{name} rank")
        shape = tuple(reader.u32(f"{name} dim") for _ in range(rank))
        dtype_tag = reader.u8(f"{name} dtype")
        if dtype_tag != _DTYPE_F64:
            raise FormatError(f"{path}: {name}: unknown dtype tag {dtype_tag}")
        numel = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = reader.take(8 * numel, f"{name} payload")
        weights[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    if reader.offset != len(reader.data):
        raise FormatError(f"{path}: {len(reader.data) - reader.offset} trailing bytes")

    if expected is not None:
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        if missing or extra:
            raise SchemaError(
                f"{path}: schema mismatch; missing {missing or 'none'}, "
                f"unexpected {extra or 'none'}"
            )
        for name, shape in expected.items():
            if weights[name].shape != tuple(shape):
                raise SchemaError(
                    f"{path}: {name} has shape {weights[name].shape}, "
                    f"expected {tuple(shape)}"
                )
    return weights
