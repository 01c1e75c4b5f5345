"""Canonical little-endian TLV encoding shared by certificates, reports and wire messages.

Each field is ``tag (u16 LE) | length (u32 LE) | value``. Fields are written
in ascending tag order and a tag may appear at most once, so every value has
exactly one encoding.
"""
from __future__ import annotations

import struct
from typing import Dict, Iterable, Optional, Tuple

HEADER = struct.Struct("<HI")
U32 = struct.Struct("<I")


class TLVDecodeError(ValueError):
    """Raised when a byte string is not a canonical TLV sequence."""


def encode_tlv(fields: Iterable[Tuple[int, bytes]]) -> bytes:
    out = bytearray()
    last = -1
    for tag, value in fields:
        if tag <= last:
            raise ValueError(f"TLV tags must be strictly ascending (got {tag:#x} after {last:#x})")
        last = tag
        out += HEADER.pack(tag, len(value))
        out += value
    return bytes(out)


def decode_tlv(data: bytes) -> Dict[int, bytes]:
    fields: Dict[int, bytes] = {}
    offset = 0
    last = -1
    while offset < len(data):
        if len(data) - offset < HEADER.size:
            raise TLVDecodeError("truncated TLV header")
        tag, length = HEADER.unpack_from(data, offset)
        offset += HEADER.size
        if tag <= last:
            raise TLVDecodeError(f"non-canonical tag order at {tag:#x}")
        if len(data) - offset < length:
            raise TLVDecodeError(f"TLV field {tag:#x} declares {length} bytes, {len(data) - offset} available")
        fields[tag] = bytes(data[offset:offset + length])
        offset += length
        last = tag
    return fields


def require(fields: Dict[int, bytes], tag: int, size: Optional[int] = None) -> bytes:
    value = fields.get(tag)
    if value is None:
        raise TLVDecodeError(f"missing TLV field {tag:#x}")
    if size is not None and len(value) != size:
        raise TLVDecodeError(f"TLV field {tag:#x} must be {size} bytes, got {len(value)}")
    return value


def pack_u32(value: int) -> bytes:
    return U32.pack(value)


def unpack_u32(value: bytes) -> int:
    if len(value) != U32.size:
        raise TLVDecodeError("u32 field must be 4 bytes")
    return U32.unpack(value)[0]
