"""Data-point quantizer: signed split, uniform level grid, exact index.

A point ``z`` with ``||z||_2 <= B`` is split into its positive and negative
parts, each coordinate is mapped to one of ``m`` levels ``i * B / (m-1)``,
and the resulting level pair is sent as its index in the alphabet of
:mod:`daquant.quant.combinatorics`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from daquant.quant.bits import BitReader, BitString, float64_bits
from daquant.quant.combinatorics import (
    CorruptMessageError,
    MembershipError,
    SetSizeTable,
    rank,
    table_for,
    unrank,
)

HEADER_BITS = 64
# Relative slack on the l2 bound check, for points normalized in floating point.
_NORM_RTOL = 1e-12


class BoundViolationError(ValueError):
    """A point exceeds the configured l2 bound in absolute mode."""


class ScaleMode(str, enum.Enum):
    ABSOLUTE = "absolute"
    PER_SAMPLE = "per_sample"
    BATCH_MAX = "batch_max"


@dataclass(frozen=True)
class QuantConfig:
    m: int
    B: float
    d: int
    mode: ScaleMode = ScaleMode.ABSOLUTE

    def __post_init__(self) -> None:
        if int(self.m) != self.m or self.m < 2:
            raise ValueError(f"m must be an integer >= 2, got {self.m!r}")
        if not (self.B > 0 and math.isfinite(self.B)):
            raise ValueError(f"B must be positive and finite, got {self.B!r}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d!r}")
        object.__setattr__(self, "mode", ScaleMode(self.mode))

    @property
    def effective_B(self) -> float:
        return 1.0 if self.mode is ScaleMode.PER_SAMPLE else float(self.B)

    @property
    def table(self) -> SetSizeTable:
        return table_for(self.d, self.m)

    @property
    def step(self) -> float:
        return self.effective_B / (self.m - 1)


@dataclass(frozen=True)
class LevelPair:
    a: np.ndarray
    b: np.ndarray

    @property
    def weight(self) -> int:
        return int(self.a.sum() + self.b.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LevelPair):
            return NotImplemented
        return np.array_equal(self.a, other.a) and np.array_equal(self.b, other.b)


@dataclass(frozen=True)
class EncodedSample:
    rank: int
    bit_length: int
    scale_header: float | None = None
    header_bits: int = 0
    # stochastic-mode coordinates forced back down to keep the pair decodable
    fallbacks: int = 0

    @property
    def total_bits(self) -> int:
        return self.bit_length + self.header_bits

    def to_bits(self) -> BitString:
        bits = BitString()
        if self.header_bits:
            bits = bits.append(float64_bits(self.scale_header), HEADER_BITS)
        return bits.append(self.rank, self.bit_length)

    @classmethod
    def read(cls, reader: BitReader, cfg: QuantConfig, has_header: bool) -> "EncodedSample":
        header = reader.read_float64() if has_header else None
        nbits = cfg.table.bit_length
        r = reader.read(nbits)
        if r >= cfg.table.size:
            raise CorruptMessageError(f"index {r} outside [0, {cfg.table.size})")
        return cls(r, nbits, header, HEADER_BITS if has_header else 0)


def _as_point(z, d: int | None = None) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"data point must be a 1-D vector, got shape {z.shape}")
    if d is not None and z.shape[0] != d:
        raise ValueError(f"data point has length {z.shape[0]}, expected {d}")
    if not np.all(np.isfinite(z)):
        raise ValueError("data point has non-finite entries")
    return z


def split_signed(z) -> tuple[np.ndarray, np.ndarray]:
    z = _as_point(z)
    return np.maximum(z, 0.0), np.maximum(-z, 0.0)


def levels_to_point(a, b, B: float, m: int) -> np.ndarray:
    return (np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) * B / (m - 1)


def _floor_levels(v: np.ndarray, bound: float, top: int) -> np.ndarray:
    """Largest level index whose reconstructed value does not exceed ``v``,
    judged with the same arithmetic the decoder uses."""
    idx = np.clip(np.floor(top * v / bound), 0, top)
    idx -= (idx > 0) & (idx * bound / top > v)
    idx += (idx < top) & ((idx + 1) * bound / top <= v)
    return idx.astype(np.int64)


def _encode_pair(a: np.ndarray, b: np.ndarray, cfg: QuantConfig, header: float | None,
                 fallbacks: int = 0) -> tuple[LevelPair, EncodedSample]:
    pair = LevelPair(a, b)
    table = cfg.table
    enc = EncodedSample(
        rank=rank(a, b, table),
        bit_length=table.bit_length,
        scale_header=header,
        header_bits=HEADER_BITS if header is not None else 0,
        fallbacks=fallbacks,
    )
    return pair, enc


def _resolve_scale(z: np.ndarray, cfg: QuantConfig, batch_scale: float | None,
                   send_header: bool) -> tuple[np.ndarray, float, float | None]:
    """Normalized point, grid bound, and header value (None when not sent)."""
    if cfg.mode is ScaleMode.ABSOLUTE:
        norm = float(np.linalg.norm(z))
        if norm > cfg.B * (1 + _NORM_RTOL):
            raise BoundViolationError(f"||z||_2 = {norm!r} exceeds B = {cfg.B!r}")
        return z, cfg.B, None
    if cfg.mode is ScaleMode.PER_SAMPLE:
        norm = float(np.linalg.norm(z))
        if norm == 0.0:
            return z, 1.0, 0.0
        return z / norm, 1.0, norm
    if batch_scale is None:
        raise ValueError("batch_max mode needs the batch scale")
    if not (batch_scale >= 0 and math.isfinite(batch_scale)):
        raise ValueError(f"invalid batch scale {batch_scale!r}")
    if np.max(np.abs(z), initial=0.0) > batch_scale:
        raise BoundViolationError("point exceeds the batch max-abs scale")
    # ||z||_2 <= sqrt(d) * max|z_j|, so this bound keeps every pair decodable.
    bound = batch_scale * math.sqrt(cfg.d) if batch_scale > 0 else 1.0
    return z, bound, (batch_scale if send_header else None)


def dataq_encode(z, cfg: QuantConfig, *, batch_scale: float | None = None,
                 send_header: bool = True) -> tuple[LevelPair, EncodedSample]:
    """Deterministic (floor) quantization of ``z``."""
    z = _as_point(z, cfg.d)
    zn, bound, header = _resolve_scale(z, cfg, batch_scale, send_header)
    zp, zm = split_signed(zn)
    top = cfg.m - 1
    return _encode_pair(_floor_levels(zp, bound, top), _floor_levels(zm, bound, top), cfg, header)


def dataq_stochastic(z, cfg: QuantConfig, rng: np.random.Generator, *,
                     batch_scale: float | None = None,
                     send_header: bool = True) -> tuple[LevelPair, EncodedSample]:
    """Unbiased quantization: round each coordinate up with probability equal
    to its fractional position between adjacent levels.

    If rounding pushes the pair outside the alphabet, rounded-up coordinates
    are reverted to their floor, last coordinate first, until it fits.
    """
    z = _as_point(z, cfg.d)
    zn, bound, header = _resolve_scale(z, cfg, batch_scale, send_header)
    zp, zm = split_signed(zn)
    top = cfg.m - 1
    u = np.minimum(top * np.concatenate([zp, zm]) / bound, top)
    lo = np.floor(u)
    up = rng.random(u.shape[0]) < (u - lo)
    idx = (lo + up).astype(np.int64)
    np.minimum(idx, top, out=idx)

    fallbacks = 0
    excess = int(idx.sum()) - top * top
    if excess > 0:
        for j in range(idx.shape[0] - 1, -1, -1):
            if excess <= 0:
                break
            if up[j] and idx[j] > lo[j]:
                idx[j] -= 1
                excess -= 1
                fallbacks += 1
        if excess > 0:
            raise MembershipError("floor fallback could not restore membership")
    return _encode_pair(idx[: cfg.d], idx[cfg.d :], cfg, header, fallbacks)


def dataq_decode(enc: EncodedSample, cfg: QuantConfig, *,
                 batch_scale: float | None = None) -> np.ndarray:
    """Reconstruct the quantized point from its index (and scale header)."""
    table = cfg.table
    if enc.rank < 0 or enc.rank >= table.size:
        raise CorruptMessageError(f"index {enc.rank} outside [0, {table.size})")
    a, b = unrank(enc.rank, table)
    if cfg.mode is ScaleMode.ABSOLUTE:
        return levels_to_point(a, b, cfg.B, cfg.m)
    if cfg.mode is ScaleMode.PER_SAMPLE:
        if enc.scale_header is None:
            raise CorruptMessageError("per-sample mode payload is missing its scale header")
        return enc.scale_header * levels_to_point(a, b, 1.0, cfg.m)
    scale = enc.scale_header if enc.scale_header is not None else batch_scale
    if scale is None:
        raise CorruptMessageError("batch scale unknown: no header received for this batch")
    bound = scale * math.sqrt(cfg.d) if scale > 0 else 1.0
    return levels_to_point(a, b, bound, cfg.m)


def bits_bound(d: int, m: int) -> float:
    """Upper bound on bits per sample: ``2 log2 m + min(2d log2(e(2d+m^2)/2d),
    m^2 log2(e(2d+m^2)/m^2))``."""
    if d < 1 or m < 2:
        raise ValueError("need d >= 1 and m >= 2")
    m2 = float(m) ** 2
    total = 2 * d + m2
    by_d = 2 * d * math.log2(math.e * total / (2 * d))
    by_m = m2 * math.log2(math.e * total / m2)
    return 2 * math.log2(m) + min(by_d, by_m)
