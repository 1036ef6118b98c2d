"""Minimal binary object codec for sensor payloads (CBOR subset).

Supports exactly the JSON-compatible slice of the wire format:
integers, text strings, booleans, null, floats, arrays, and maps with
text keys. Definite lengths only; integer heads and floats use the
shortest form that preserves the value. Everything outside the slice
(byte strings, tags, indefinite lengths, simple values, non-text keys)
is rejected rather than silently mangled.
"""

from __future__ import annotations

import math
import struct
from typing import Any

from .errors import DecodeError, UnsupportedItem

# Largest integer magnitude that survives a JSON round-trip intact.
MAX_SAFE_INT = 2**53 - 1

_MAX_DEPTH = 256

_MT_UINT = 0
_MT_NINT = 1
_MT_BYTES = 2
_MT_TEXT = 3
_MT_ARRAY = 4
_MT_MAP = 5
_MT_TAG = 6
_MT_SIMPLE = 7


def _encode_head(major: int, arg: int) -> bytes:
    if arg < 24:
        return bytes([(major << 5) | arg])
    if arg < 0x100:
        return bytes([(major << 5) | 24, arg])
    if arg < 0x10000:
        return struct.pack(">BH", (major << 5) | 25, arg)
    if arg < 0x100000000:
        return struct.pack(">BI", (major << 5) | 26, arg)
    return struct.pack(">BQ", (major << 5) | 27, arg)


def _encode_float(value: float) -> bytes:
    if not math.isfinite(value):
        raise UnsupportedItem("non-finite floats are not representable in JSON documents")
    # Shortest width that round-trips the exact value.
    for prefix, fmt in ((b"\xf9", ">e"), (b"\xfa", ">f")):
        try:
            packed = struct.pack(fmt, value)
        except (OverflowError, struct.error):
            continue
        if struct.unpack(fmt, packed)[0] == value:
            return prefix + packed
    return b"\xfb" + struct.pack(">d", value)


def _encode_item(value: Any, depth: int) -> bytes:
    if depth > _MAX_DEPTH:
        raise UnsupportedItem("nesting too deep to encode")
    # bool first: it is a subtype of int.
    if value is False:
        return b"\xf4"
    if value is True:
        return b"\xf5"
    if value is None:
        return b"\xf6"
    if isinstance(value, int):
        if value > MAX_SAFE_INT or value < -MAX_SAFE_INT:
            raise UnsupportedItem(f"integer magnitude exceeds 2**53-1: {value}")
        if value >= 0:
            return _encode_head(_MT_UINT, value)
        return _encode_head(_MT_NINT, -1 - value)
    if isinstance(value, float):
        return _encode_float(value)
    if isinstance(value, str):
        raw = value.encode("utf-8")
        return _encode_head(_MT_TEXT, len(raw)) + raw
    if isinstance(value, (list, tuple)):
        out = [_encode_head(_MT_ARRAY, len(value))]
        for item in value:
            out.append(_encode_item(item, depth + 1))
        return b"".join(out)
    if isinstance(value, dict):
        out = [_encode_head(_MT_MAP, len(value))]
        for key, item in value.items():
            if not isinstance(key, str):
                raise UnsupportedItem(f"map keys must be text, got {type(key).__name__}")
            raw = key.encode("utf-8")
            out.append(_encode_head(_MT_TEXT, len(raw)) + raw)
            out.append(_encode_item(item, depth + 1))
        return b"".join(out)
    raise UnsupportedItem(f"cannot encode {type(value).__name__}")


def encode(value: Any) -> bytes:
    """Serialize a JSON-compatible value to the binary wire form."""
    return _encode_item(value, 0)


class _Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError("unexpected end of input", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def head(self) -> tuple[int, int, int]:
        """Read one item head: (major type, argument, head offset)."""
        start = self.pos
        initial = self.take(1)[0]
        major = initial >> 5
        info = initial & 0x1F
        if info < 24:
            return major, info, start
        if info == 24:
            return major, self.take(1)[0], start
        if info == 25:
            return major, struct.unpack(">H", self.take(2))[0], start
        if info == 26:
            return major, struct.unpack(">I", self.take(4))[0], start
        if info == 27:
            return major, struct.unpack(">Q", self.take(8))[0], start
        if info in (28, 29, 30):
            raise DecodeError(f"reserved additional info {info}", start)
        # info == 31: indefinite length or a stray break marker.
        raise DecodeError("indefinite-length items are not supported", start)


def _decode_simple(reader: _Reader, initial_info: int, start: int) -> Any:
    if initial_info == 20:
        return False
    if initial_info == 21:
        return True
    if initial_info == 22:
        return None
    if initial_info == 23:
        raise UnsupportedItem("'undefined' has no JSON counterpart")
    if initial_info < 20:
        raise UnsupportedItem(f"simple value {initial_info} has no JSON counterpart")
    if initial_info == 24:
        raise UnsupportedItem("extended simple values have no JSON counterpart")
    raise DecodeError(f"unhandled simple head {initial_info}", start)


def _decode_item(reader: _Reader, depth: int) -> Any:
    if depth > _MAX_DEPTH:
        raise DecodeError("nesting too deep", reader.pos)
    start = reader.pos
    initial = reader.data[start] if start < len(reader.data) else None
    if initial is None:
        raise DecodeError("unexpected end of input", start)
    info = initial & 0x1F
    major = initial >> 5
    # Floats and simple values do not use the generic head argument path.
    if major == _MT_SIMPLE:
        reader.take(1)
        if info == 25:
            value = struct.unpack(">e", reader.take(2))[0]
        elif info == 26:
            value = struct.unpack(">f", reader.take(4))[0]
        elif info == 27:
            value = struct.unpack(">d", reader.take(8))[0]
        elif info == 31:
            raise DecodeError("break marker outside an indefinite-length item", start)
        elif info in (28, 29, 30):
            raise DecodeError(f"reserved additional info {info}", start)
        elif info == 24:
            reader.take(1)
            raise UnsupportedItem("extended simple values have no JSON counterpart")
        else:
            return _decode_simple(reader, info, start)
        if not math.isfinite(value):
            raise UnsupportedItem("non-finite floats are not representable in JSON documents")
        return value

    major, arg, start = reader.head()
    if major == _MT_UINT:
        if arg > MAX_SAFE_INT:
            raise UnsupportedItem(f"integer exceeds 2**53-1: {arg}")
        return arg
    if major == _MT_NINT:
        value = -1 - arg
        if value < -MAX_SAFE_INT:
            raise UnsupportedItem(f"integer magnitude exceeds 2**53-1: {value}")
        return value
    if major == _MT_BYTES:
        raise UnsupportedItem("byte strings have no JSON counterpart")
    if major == _MT_TEXT:
        raw = reader.take(arg)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"invalid UTF-8 in text string: {exc.reason}", start) from exc
    if major == _MT_ARRAY:
        if arg > len(reader.data) - reader.pos:
            raise DecodeError(f"array length {arg} exceeds remaining input", start)
        return [_decode_item(reader, depth + 1) for _ in range(arg)]
    if major == _MT_MAP:
        if arg > (len(reader.data) - reader.pos) // 2:
            raise DecodeError(f"map length {arg} exceeds remaining input", start)
        result: dict[str, Any] = {}
        for _ in range(arg):
            key_start = reader.pos
            key = _decode_item(reader, depth + 1)
            if not isinstance(key, str):
                raise UnsupportedItem(f"map keys must be text, got {type(key).__name__}")
            if key in result:
                raise DecodeError(f"duplicate map key {key!r}", key_start)
            result[key] = _decode_item(reader, depth + 1)
        return result
    if major == _MT_TAG:
        raise UnsupportedItem("tagged items have no JSON counterpart")
    raise DecodeError(f"unhandled major type {major}", start)


def decode(data: bytes) -> Any:
    """Parse one binary item; reject trailing bytes and anything outside the subset."""
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise TypeError(f"expected bytes, got {type(data).__name__}")
    reader = _Reader(bytes(data))
    value = _decode_item(reader, 0)
    if reader.pos != len(reader.data):
        raise DecodeError("trailing bytes after the top-level item", reader.pos)
    return value
