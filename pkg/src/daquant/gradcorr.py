"""One-coordinate stochastic correction of the gradient at a quantized point.

The node knows ``delta = g_z(w) - g_{z_Q}(w)``.  It picks a coordinate
``istar`` uniformly and sends one Bernoulli bit ``e`` with
``P(e = 1) = delta[istar] / (2 cap) + 1/2``.  The agent adds
``(2e - 1) * h * cap`` at ``istar``, which is unbiased for ``delta``
whenever ``|delta_i| <= cap``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from daquant.quant.bits import BitReader, BitString
from daquant.quant.combinatorics import CorruptMessageError


@dataclass(frozen=True)
class CorrectionParams:
    C_z: float
    B: float
    d: int
    h: int
    m: int

    def __post_init__(self) -> None:
        for name in ("C_z", "B"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v!r}")
        if self.d < 1 or self.h < 1 or self.m < 2:
            raise ValueError("need d >= 1, h >= 1, m >= 2")

    @property
    def delta_cap(self) -> float:
        """Per-coordinate bound on ``delta``: ``C_z B sqrt(d) / (m - 1)``."""
        return self.C_z * self.B * math.sqrt(self.d) / (self.m - 1)

    @property
    def index_bits(self) -> int:
        return (self.h - 1).bit_length()


@dataclass(frozen=True)
class CorrectionMsg:
    istar: int
    e_g: int
    uses_shared_randomness: bool = False
    # p fell outside [0, 1] and was clamped (C_z too small for this delta)
    capped: bool = False

    def wire_bits(self, params: CorrectionParams) -> int:
        return 1 if self.uses_shared_randomness else params.index_bits + 1

    def to_bits(self, params: CorrectionParams) -> BitString:
        bits = BitString()
        if not self.uses_shared_randomness:
            bits = bits.append(self.istar, params.index_bits)
        return bits.append(self.e_g, 1)

    @classmethod
    def read(cls, reader: BitReader, params: CorrectionParams,
             shared_istar: int | None = None) -> "CorrectionMsg":
        if shared_istar is None:
            istar = reader.read(params.index_bits)
        else:
            istar = shared_istar
        msg = cls(istar, reader.read(1), shared_istar is not None)
        if msg.istar >= params.h:
            raise CorruptMessageError(f"coordinate {msg.istar} outside [0, {params.h})")
        return msg


def correction_prob(delta_i: float, cap: float) -> float:
    """Unclamped probability of sending a 1 for coordinate value ``delta_i``."""
    return delta_i / (2.0 * cap) + 0.5


def gradcorr_encode(delta, params: CorrectionParams, rng: np.random.Generator,
                    istar: int | None = None) -> CorrectionMsg:
    """Quantize ``delta`` to a single signed coordinate.

    Pass ``istar`` when it comes from randomness shared with the agent; the
    message then costs one bit on the wire.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (params.h,):
        raise ValueError(f"delta must have shape ({params.h},), got {delta.shape}")
    if not np.all(np.isfinite(delta)):
        raise ValueError("delta has non-finite entries")
    shared = istar is not None
    if istar is None:
        istar = int(rng.integers(params.h))
    elif not 0 <= istar < params.h:
        raise ValueError(f"istar {istar} outside [0, {params.h})")
    p = correction_prob(float(delta[istar]), params.delta_cap)
    capped = not 0.0 <= p <= 1.0
    p = min(max(p, 0.0), 1.0)
    e_g = int(rng.random() < p)
    return CorrectionMsg(int(istar), e_g, shared, capped)


def gradcorr_decode(msg: CorrectionMsg, params: CorrectionParams) -> np.ndarray:
    if not 0 <= msg.istar < params.h:
        raise CorruptMessageError(f"coordinate {msg.istar} outside [0, {params.h})")
    if msg.e_g not in (0, 1):
        raise CorruptMessageError(f"sign bit must be 0 or 1, got {msg.e_g!r}")
    out = np.zeros(params.h)
    out[msg.istar] = (2 * msg.e_g - 1) * params.h * params.delta_cap
    return out


def assemble_gradient(g_at_zQ, deltahat=None) -> np.ndarray:
    g = np.asarray(g_at_zQ, dtype=np.float64)
    if deltahat is None:
        return g.copy()
    deltahat = np.asarray(deltahat, dtype=np.float64)
    if deltahat.shape != g.shape:
        raise ValueError(f"shape mismatch: {g.shape} vs {deltahat.shape}")
    return g + deltahat
