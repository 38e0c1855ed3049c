"""Byte-level reader/writer behind every canonical encoding.

Integers are fixed-width big-endian, floats are IEEE-754 binary64
big-endian, variable-size values carry a u32 length prefix.
"""

from __future__ import annotations

import struct


class DecodeError(ValueError):
    pass


class Writer:
    __slots__ = ("_parts",)

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">B", value))
        return self

    def u16(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">H", value))
        return self

    def u32(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">I", value))
        return self

    def u64(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">Q", value))
        return self

    def f64(self, value: float) -> "Writer":
        self._parts.append(struct.pack(">d", value))
        return self

    def fixed(self, data: bytes, size: int) -> "Writer":
        if len(data) != size:
            raise ValueError(f"expected {size} bytes, got {len(data)}")
        self._parts.append(bytes(data))
        return self

    def var(self, data: bytes) -> "Writer":
        self._parts.append(struct.pack(">I", len(data)))
        self._parts.append(bytes(data))
        return self

    def raw(self, data: bytes) -> "Writer":
        self._parts.append(data)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    __slots__ = ("_data", "_pos")

    def __init__(self, data: bytes) -> None:
        self._data = memoryview(data)
        self._pos = 0

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._data):
            raise DecodeError(f"truncated input: need {n} bytes at offset {self._pos}")
        chunk = self._data[self._pos:end].tobytes()
        self._pos = end
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack(">d", self._take(8))[0]

    def fixed(self, size: int) -> bytes:
        return self._take(size)

    def var(self) -> bytes:
        return self._take(self.u32())

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def finish(self) -> None:
        if self.remaining:
            raise DecodeError(f"{self.remaining} trailing bytes")
