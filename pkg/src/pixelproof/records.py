"""RPAK v1 packed-record files.

Layout (all integers little-endian)::

    "RPAK" | u32 count | count x (u32 length | payload)

Reading is sequential and streaming: one record is materialized at a time.
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Union

__all__ = ["RPAK_MAGIC", "RecordFormatError", "iter_records", "pack_records", "read_pack", "write_pack"]

RPAK_MAGIC = b"RPAK"
_U32 = struct.Struct("<I")

Source = Union[bytes, bytearray, memoryview, BinaryIO]


class RecordFormatError(ValueError):
    def __init__(self, message: str, index: int | None = None):
        self.index = index
        super().__init__(message if index is None else f"record {index}: {message}")


def _payload(item: bytes | str | os.PathLike) -> bytes:
    if isinstance(item, (bytes, bytearray, memoryview)):
        return bytes(item)
    return Path(item).read_bytes()


def pack_records(files: Iterable[bytes | str | os.PathLike]) -> bytes:
    """Pack payloads (raw bytes or file paths) in the given order."""
    payloads = [_payload(f) for f in files]
    if not payloads:
        raise ValueError("cannot pack an empty list of records")
    out = [RPAK_MAGIC, _U32.pack(len(payloads))]
    for i, p in enumerate(payloads):
        if not p:
            raise ValueError(f"record {i} is empty")
        if len(p) > 0xFFFFFFFF:
            raise ValueError(f"record {i} exceeds the u32 length limit")
        out.append(_U32.pack(len(p)))
        out.append(p)
    return b"".join(out)


def write_pack(path: str | os.PathLike, files: Iterable[bytes | str | os.PathLike]) -> int:
    data = pack_records(files)
    Path(path).write_bytes(data)
    return len(data)


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    return b"" if buf is None else buf


def iter_records(source: Source) -> Iterator[bytes]:
    """Yield payloads in order from packed bytes or a binary stream."""
    stream: BinaryIO = (
        io.BytesIO(source) if isinstance(source, (bytes, bytearray, memoryview)) else source
    )
    head = _read_exact(stream, 8)
    if len(head) < 8 or head[:4] != RPAK_MAGIC:
        raise RecordFormatError("bad magic: not an RPAK stream")
    (count,) = _U32.unpack_from(head, 4)
    for index in range(count):
        raw_len = _read_exact(stream, 4)
        if len(raw_len) < 4:
            raise RecordFormatError("truncated length field", index)
        (length,) = _U32.unpack(raw_len)
        payload = _read_exact(stream, length)
        if len(payload) < length:
            raise RecordFormatError(
                f"truncated payload (length field says {length}, {len(payload)} bytes remain)", index
            )
        yield payload
    if stream.read(1):
        raise RecordFormatError(f"trailing bytes after {count} records")


def read_pack(path: str | os.PathLike) -> Iterator[bytes]:
    with open(path, "rb") as fh:
        yield from iter_records(fh)
