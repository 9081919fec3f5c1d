"""Shared binary-container plumbing for the on-disk formats.

Every artifact this package writes (sample files, checkpoints, raw relevance
dumps) is little-endian, starts with a four-byte magic tag, and -- except for
the small relevance dumps -- ends with a CRC-64 of everything before the
checksum, so truncation and bit corruption are caught on read.
"""

from __future__ import annotations

import struct

# CRC-64/XZ: reflected polynomial 0x42f0e1eba9ea3693, init and xor-out all
# ones. Check value for b"123456789" is 0x995dc9bbdf1939fa.
_POLY = 0xC96C5795D7870F42
_MASK = 0xFFFFFFFFFFFFFFFF


class FormatError(ValueError):
    """A binary file does not match its declared format (magic, size, CRC)."""


def _build_tables() -> list[list[int]]:
    base = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ _POLY if crc & 1 else crc >> 1
        base.append(crc)
    tables = [base]
    for _ in range(7):
        prev = tables[-1]
        tables.append([base[c & 0xFF] ^ (c >> 8) for c in prev])
    return tables


_TABLES = _build_tables()


def crc64(data: bytes) -> int:
    """CRC-64/XZ of ``data`` (slice-by-8 table implementation)."""
    crc = _MASK
    head = len(data) - len(data) % 8
    t0, t1, t2, t3, t4, t5, t6, t7 = reversed(_TABLES)
    for (word,) in struct.iter_unpack("<Q", data[:head]):
        crc ^= word
        crc = (
            t0[crc & 0xFF]
            ^ t1[(crc >> 8) & 0xFF]
            ^ t2[(crc >> 16) & 0xFF]
            ^ t3[(crc >> 24) & 0xFF]
            ^ t4[(crc >> 32) & 0xFF]
            ^ t5[(crc >> 40) & 0xFF]
            ^ t6[(crc >> 48) & 0xFF]
            ^ t7[(crc >> 56) & 0xFF]
        )
    for byte in data[head:]:
        crc = _TABLES[0][(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ _MASK


def append_crc(payload: bytes) -> bytes:
    """Return ``payload`` with its CRC-64 appended as a little-endian u64."""
    return payload + struct.pack("<Q", crc64(payload))


def split_checked(data: bytes, what: str) -> bytes:
    """Strip and verify the trailing CRC-64, returning the payload.

    Raises FormatError when the buffer is too short or the checksum does not
    match, naming ``what`` in the message.
    """
    if len(data) < 8:
        raise FormatError(f"{what}: file too short to hold a checksum")
    payload, tail = data[:-8], data[-8:]
    (stored,) = struct.unpack("<Q", tail)
    actual = crc64(payload)
    if stored != actual:
        raise FormatError(
            f"{what}: CRC mismatch (stored {stored:#018x}, computed {actual:#018x})"
        )
    return payload


def expect_magic(data: bytes, magic: bytes, what: str) -> None:
    if len(data) < len(magic) or data[: len(magic)] != magic:
        raise FormatError(f"{what}: bad magic, expected {magic!r}")
