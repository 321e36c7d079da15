"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"JASN"                      magic
    u32   version                (currently 1)
    u64   record count
    per record, sorted by name:
        u32   name length, then the UTF-8 name
        u32   rank
        u64 x rank   extents
        f64 x prod(extents)   row-major payload
    u32   CRC-32 of every preceding byte

Besides parameters the file carries ``adam.m.<param>`` / ``adam.v.<param>``
moments, normalization running statistics, scalar ``meta.*`` records and
``meta.config``, whose payload is the UTF-8 bytes of the config text
stored one byte per float.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SerializationError

MAGIC = b"JASN"
VERSION = 1


@dataclass
class Checkpoint:
    records: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config_text(self) -> str:
        return bytes(self.records["meta.config"].astype(np.uint8)).decode("utf-8")

    def meta(self, key: str) -> int:
        return int(self.records[f"meta.{key}"])


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def to_bytes(records: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(records))]
    for name in sorted(records):
        arr = np.array(records[name], dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 20:
        raise SerializationError("file too short to be a checkpoint", offset=len(buf))
    if buf[:4] != MAGIC:
        raise SerializationError(f"bad magic {buf[:4]!r}", offset=0)
    stored = struct.unpack_from("<I", buf, len(buf) - 4)[0]
    if zlib.crc32(buf[:-4]) != stored:
        raise SerializationError("CRC mismatch; file is corrupt", offset=len(buf) - 4)
    version = struct.unpack_from("<I", buf, 4)[0]
    if version != VERSION:
        raise SerializationError(f"unsupported format version {version} (expected {VERSION})", offset=4)
    end = len(buf) - 4
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > end:
            raise SerializationError("record runs past end of file", offset=pos)
        out = struct.unpack_from(fmt, buf, pos)
        pos += size
        return out

    (count,) = take("<Q")
    records = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > end:
            raise SerializationError("record name runs past end of file", offset=pos)
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        if pos + 8 * size > end:
            raise SerializationError(f"payload of {name!r} runs past end of file", offset=pos)
        records[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != end:
        raise SerializationError(f"{end - pos} unexpected bytes after the last record", offset=pos)
    return Checkpoint(records)


def save_checkpoint(path, records: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(records))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise SerializationError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return from_bytes(buf)
