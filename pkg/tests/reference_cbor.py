"""Independent reference codec used only by the tests.

Implements the same JSON-compatible wire subset as the package codec
but shares no code with it: a table-driven encoder built on struct
format strings and a tiny recursive-descent decoder. Kept deliberately
simple and slow; its job is to disagree loudly if the production codec
drifts from the preferred binary form.
"""

from __future__ import annotations

import math
import struct

_WIDTH_PACKS = [(24, ">B"), (25, ">H"), (26, ">I"), (27, ">Q")]
_LIMITS = [24, 1 << 8, 1 << 16, 1 << 32, 1 << 64]


def _head(major: int, n: int) -> bytes:
    if n < 24:
        return bytes([major << 5 | n])
    for (info, fmt), limit in zip(_WIDTH_PACKS, _LIMITS[1:]):
        if n < limit:
            return bytes([major << 5 | info]) + struct.pack(fmt, n)
    raise ValueError(f"length does not fit an 8-byte head: {n}")


def _float_bytes(x: float) -> bytes:
    if math.isnan(x) or math.isinf(x):
        raise ValueError("non-finite float")
    for info, fmt in ((25, ">e"), (26, ">f"), (27, ">d")):
        try:
            packed = struct.pack(fmt, x)
        except (OverflowError, struct.error):
            continue
        if struct.unpack(fmt, packed)[0] == x:
            return bytes([7 << 5 | info]) + packed
    raise AssertionError("float must fit a double")


def ref_encode(value) -> bytes:
    if value is True:
        return b"\xf5"
    if value is False:
        return b"\xf4"
    if value is None:
        return b"\xf6"
    if isinstance(value, int):
        if abs(value) > 2**53 - 1:
            raise ValueError("integer outside the interoperable range")
        return _head(0, value) if value >= 0 else _head(1, -1 - value)
    if isinstance(value, float):
        return _float_bytes(value)
    if isinstance(value, str):
        data = value.encode("utf-8")
        return _head(3, len(data)) + data
    if isinstance(value, (list, tuple)):
        return _head(4, len(value)) + b"".join(ref_encode(v) for v in value)
    if isinstance(value, dict):
        chunks = [_head(5, len(value))]
        for key, item in value.items():
            if not isinstance(key, str):
                raise ValueError("only text keys")
            chunks.append(ref_encode(key))
            chunks.append(ref_encode(item))
        return b"".join(chunks)
    raise ValueError(f"unencodable type {type(value).__name__}")


def ref_decode(data: bytes):
    value, used = _parse(bytes(data), 0)
    if used != len(data):
        raise ValueError("trailing bytes")
    return value


def _parse(buf: bytes, at: int):
    if at >= len(buf):
        raise ValueError("truncated")
    first = buf[at]
    major, info = first >> 5, first & 0x1F
    if major == 7:
        if info in (20, 21, 22):
            return (False, True, None)[info - 20], at + 1
        if info in (25, 26, 27):
            fmt, size = {25: (">e", 2), 26: (">f", 4), 27: (">d", 8)}[info]
            end = at + 1 + size
            if end > len(buf):
                raise ValueError("truncated float")
            x = struct.unpack(fmt, buf[at + 1 : end])[0]
            if not math.isfinite(x):
                raise ValueError("non-finite float")
            return x, end
        raise ValueError(f"unsupported simple/info {info}")
    arg, at = _argument(buf, at, info)
    if major == 0:
        return arg, at
    if major == 1:
        return -1 - arg, at
    if major == 3:
        end = at + arg
        if end > len(buf):
            raise ValueError("truncated text")
        return buf[at:end].decode("utf-8"), end
    if major == 4:
        items = []
        for _ in range(arg):
            item, at = _parse(buf, at)
            items.append(item)
        return items, at
    if major == 5:
        table = {}
        for _ in range(arg):
            key, at = _parse(buf, at)
            if not isinstance(key, str) or key in table:
                raise ValueError("bad map key")
            table[key], at = _parse(buf, at)
        return table, at
    raise ValueError(f"unsupported major type {major}")


def _argument(buf: bytes, at: int, info: int):
    if info < 24:
        return info, at + 1
    sizes = {24: 1, 25: 2, 26: 4, 27: 8}
    if info not in sizes:
        raise ValueError(f"unsupported head info {info}")
    size = sizes[info]
    end = at + 1 + size
    if end > len(buf):
        raise ValueError("truncated head")
    return int.from_bytes(buf[at + 1 : end], "big"), end
