"""
Canonical Encoding Module for PVTN

Signatures and ciphertexts always cover the canonical byte form produced
here: every value is a one-byte type tag, a 4-byte big-endian length and
the content. Mappings keep their insertion (declaration) order, so the
same record always encodes to the same bytes.
"""

import struct
from enum import Enum
from typing import Any

_LEN = struct.Struct(">I")
_INT = struct.Struct(">q")


def _frame(tag: bytes, content: bytes) -> bytes:
    return tag + _LEN.pack(len(content)) + content


def encode(value: Any) -> bytes:
    """
    Encode a value into canonical bytes.

    Supported values are None, bool, int, bytes, str, Enum members (by value),
    lists/tuples and str-keyed dicts, nested arbitrarily.

    Raises:
        TypeError: for any other type
    """
    if value is None:
        return _frame(b"N", b"")
    if isinstance(value, bool):
        return _frame(b"T" if value else b"F", b"")
    if isinstance(value, Enum):
        return encode(value.value)
    if isinstance(value, int):
        return _frame(b"I", _INT.pack(value))
    if isinstance(value, (bytes, bytearray)):
        return _frame(b"B", bytes(value))
    if isinstance(value, str):
        return _frame(b"S", value.encode("utf-8"))
    if isinstance(value, (list, tuple)):
        return _frame(b"L", b"".join(encode(item) for item in value))
    if isinstance(value, dict):
        parts = []
        for key, item in value.items():
            if not isinstance(key, str):
                raise TypeError(f"mapping keys must be str, got {type(key).__name__}")
            parts.append(encode(key))
            parts.append(encode(item))
        return _frame(b"M", b"".join(parts))
    raise TypeError(f"cannot encode {type(value).__name__}")


def _decode_at(data: bytes, offset: int) -> tuple[Any, int]:
    if offset + 5 > len(data):
        raise ValueError("truncated frame header")
    tag = data[offset:offset + 1]
    (length,) = _LEN.unpack_from(data, offset + 1)
    start = offset + 5
    end = start + length
    if end > len(data):
        raise ValueError("truncated frame content")
    content = data[start:end]

    if tag == b"N":
        return None, end
    if tag == b"T":
        return True, end
    if tag == b"F":
        return False, end
    if tag == b"I":
        if length != _INT.size:
            raise ValueError("bad integer width")
        return _INT.unpack(content)[0], end
    if tag == b"B":
        return content, end
    if tag == b"S":
        return content.decode("utf-8"), end
    if tag == b"L":
        items = []
        cursor = start
        while cursor < end:
            item, cursor = _decode_at(data, cursor)
            items.append(item)
        if cursor != end:
            raise ValueError("list overruns its frame")
        return items, end
    if tag == b"M":
        mapping = {}
        cursor = start
        while cursor < end:
            key, cursor = _decode_at(data, cursor)
            if not isinstance(key, str):
                raise ValueError("mapping key is not a string")
            mapping[key], cursor = _decode_at(data, cursor)
        if cursor != end:
            raise ValueError("mapping overruns its frame")
        return mapping, end
    raise ValueError(f"unknown tag {tag!r}")


def decode(data: bytes) -> Any:
    """
    Decode canonical bytes produced by encode().

    Raises:
        ValueError: on truncated, trailing or unknown data
    """
    value, end = _decode_at(bytes(data), 0)
    if end != len(data):
        raise ValueError("trailing bytes after value")
    return value
