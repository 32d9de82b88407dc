"""One-bit stochastic scalar quantizer and the polynomial-feature gradient code.

The scalar code sends bit 1 with probability ``(x + 1) / 2`` and decodes a
bit ``e`` as ``2e - 1``, so the decoded value is an unbiased +-1 estimate of
``x`` in ``[-1, 1]``.
"""

from __future__ import annotations

import math

import numpy as np


def _check_unit(x: float, what: str = "x") -> float:
    x = float(x)
    if not math.isfinite(x) or abs(x) > 1.0:
        raise ValueError(f"{what} must lie in [-1, 1], got {x!r}")
    return x


def scalar_1bit_prob(x: float) -> float:
    """Probability that :func:`scalar_1bit_encode` emits a 1."""
    return (_check_unit(x) + 1.0) / 2.0


def scalar_1bit_encode(x: float, rng: np.random.Generator) -> int:
    p = scalar_1bit_prob(x)
    return int(rng.random() < p)


def scalar_1bit_decode(bit: int) -> float:
    if bit not in (0, 1):
        raise ValueError(f"bit must be 0 or 1, got {bit!r}")
    return 2.0 * bit - 1.0


def power_bit_count(k: int) -> int:
    """Number of power bits for monomials up to degree ``k``.

    Degrees ``1..k`` are written in binary with exponents ``1, 2, 4, ...``;
    this needs ``ceil(log2(k + 1))`` of them (``k = h - 1``).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return int(k).bit_length()


def logistic_slope(u: float, y: int) -> float:
    """Derivative of ``log(1 + exp(-y u))`` with respect to ``u``; lies in [-1, 1]."""
    # -y * sigmoid(-y u), evaluated without overflow
    t = -y * u
    s = 1.0 / (1.0 + math.exp(-t)) if t >= 0 else math.exp(t) / (1.0 + math.exp(t))
    return -y * s


def poly_features(z: float, h: int) -> np.ndarray:
    return float(z) ** np.arange(h, dtype=np.float64)


def poly_example_encode(z: float, w: np.ndarray, k: int, rng: np.random.Generator,
                        y: int = 1) -> list[int]:
    """Bits for one sample of the polynomial logistic task.

    ``w`` has ``h = k + 1`` entries.  Returns ``1 + power_bit_count(k)`` bits:
    the quantized loss slope followed by the quantized powers ``z**(2**j)``.
    """
    z = _check_unit(z, "z")
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (k + 1,):
        raise ValueError(f"w must have k + 1 = {k + 1} entries, got shape {w.shape}")
    if np.linalg.norm(w) > 1.0 + 1e-12:
        raise ValueError("||w||_2 must be at most 1")
    slope = logistic_slope(float(w @ poly_features(z, k + 1)), y)
    bits = [scalar_1bit_encode(slope, rng)]
    bits += [scalar_1bit_encode(z ** (2**j), rng) for j in range(power_bit_count(k))]
    return bits


def poly_example_decode(bits: list[int], w: np.ndarray) -> np.ndarray:
    """Gradient estimate ``(1/sqrt(h)) * s * [1, Q(z^1), ..., Q(z^k)]``.

    ``Q(z^i)`` is the product of the decoded power bits selected by the binary
    digits of ``i``.
    """
    h = np.asarray(w).shape[0]
    k = h - 1
    nb = power_bit_count(k)
    if len(bits) != 1 + nb:
        raise ValueError(f"expected {1 + nb} bits for h={h}, got {len(bits)}")
    slope = scalar_1bit_decode(bits[0])
    powers = [scalar_1bit_decode(b) for b in bits[1:]]
    q = np.ones(h)
    for i in range(1, h):
        for j in range(nb):
            if (i >> j) & 1:
                q[i] *= powers[j]
    return slope * q / math.sqrt(h)
