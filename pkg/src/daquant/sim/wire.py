"""Uplink messages and their byte framing.

Frame: 1 type byte, 4-byte big-endian payload bit count, then the payload
MSB-first, zero-padded to a byte boundary.  Only the payload bits are
metered.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from daquant.quant.bits import BitString
from daquant.quant.combinatorics import CorruptMessageError


class MsgType(enum.IntEnum):
    SAMPLE_ENC = 1
    CORRECTION = 2
    SKIP = 3
    GRADQ_BASELINE = 4
    UNQUANTIZED = 5


@dataclass(frozen=True)
class WireMessage:
    msg_type: MsgType
    payload: BitString = BitString()

    @property
    def bit_cost(self) -> int:
        return self.payload.length

    def frame(self) -> bytes:
        return struct.pack(">BI", int(self.msg_type), self.payload.length) + self.payload.to_bytes()


def encode_frames(msgs: list[WireMessage]) -> bytes:
    return b"".join(m.frame() for m in msgs)


def decode_frames(data: bytes) -> list[WireMessage]:
    out = []
    pos = 0
    while pos < len(data):
        if len(data) - pos < 5:
            raise CorruptMessageError("truncated frame header")
        code, nbits = struct.unpack_from(">BI", data, pos)
        pos += 5
        try:
            msg_type = MsgType(code)
        except ValueError:
            raise CorruptMessageError(f"unknown message type {code}") from None
        nbytes = (nbits + 7) // 8
        if len(data) - pos < nbytes:
            raise CorruptMessageError("truncated frame payload")
        try:
            payload = BitString.from_bytes(data[pos : pos + nbytes], nbits)
        except ValueError as exc:
            raise CorruptMessageError(str(exc)) from None
        out.append(WireMessage(msg_type, payload))
        pos += nbytes
    return out
