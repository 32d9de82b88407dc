"""MSB-first bit strings backed by a Python int."""

from __future__ import annotations

import struct
from dataclasses import dataclass


@dataclass(frozen=True)
class BitString:
    value: int = 0
    length: int = 0

    def __post_init__(self) -> None:
        if self.length < 0 or self.value < 0 or self.value >> self.length:
            raise ValueError(f"value {self.value} does not fit in {self.length} bits")

    def append(self, value: int, width: int) -> "BitString":
        value = int(value)
        if width < 0 or value < 0 or value >> width:
            raise ValueError(f"value {value} does not fit in {width} bits")
        return BitString((self.value << width) | value, self.length + width)

    def concat(self, other: "BitString") -> "BitString":
        return self.append(other.value, other.length)

    def to_bytes(self) -> bytes:
        """Pack MSB-first, zero-padding the final byte."""
        nbytes = (self.length + 7) // 8
        pad = nbytes * 8 - self.length
        return (self.value << pad).to_bytes(nbytes, "big")

    @classmethod
    def from_bytes(cls, data: bytes, length: int) -> "BitString":
        if length > len(data) * 8:
            raise ValueError(f"{len(data)} bytes cannot hold {length} bits")
        pad = len(data) * 8 - length
        value = int.from_bytes(data, "big")
        if value & ((1 << pad) - 1):
            raise ValueError("nonzero padding bits")
        return cls(value >> pad, length)

    def reader(self) -> "BitReader":
        return BitReader(self)


class BitReader:
    def __init__(self, bits: BitString):
        self._bits = bits
        self._pos = 0

    @property
    def remaining(self) -> int:
        return self._bits.length - self._pos

    def read(self, width: int) -> int:
        if width > self.remaining:
            raise ValueError(f"read of {width} bits past end ({self.remaining} left)")
        shift = self.remaining - width
        self._pos += width
        return (self._bits.value >> shift) & ((1 << width) - 1)

    def read_float64(self) -> float:
        return struct.unpack(">d", self.read(64).to_bytes(8, "big"))[0]


def float64_bits(x: float) -> int:
    """IEEE-754 big-endian bit pattern of ``x`` as an unsigned int."""
    return int.from_bytes(struct.pack(">d", float(x)), "big")
