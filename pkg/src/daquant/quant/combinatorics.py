"""Exact ranking of bounded-L1 integer vector pairs.

The alphabet is the set of pairs (a, b) of nonnegative integer d-vectors
with ``sum(a) + sum(b) <= (m - 1) ** 2``.  A pair is flattened to the
2d-part weak composition ``x = [a, b]`` of its weight ``q = sum(x)``.

Order: by weight ascending, then by the colexicographic rank of the bar
positions of ``x`` in the stars-and-bars picture.  The bar positions are
``p_j = x_0 + ... + x_j + j`` for ``j = 0 .. 2d - 2``; they form a
(2d-1)-subset of ``{0, ..., q + 2d - 2}`` whose colex rank is
``sum_j C(p_j, j + 1)`` (combinatorial number system).

All counts are Python ints, so nothing overflows for large d or m.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
import math
from math import comb
from typing import Sequence

import numpy as np

# Below this many factors math.comb is cheaper than walking a ratio
# recurrence from the previous coefficient.
DIRECT_COMB_LIMIT = 64
# Gaps between neighbouring bar positions are usually small; walking the
# ratio recurrence this many steps is tried before a search.
WALK_STEPS = 16


class MembershipError(ValueError):
    """Raised when a level pair lies outside the alphabet."""


class CorruptMessageError(ValueError):
    """Raised when a received index or payload cannot be decoded."""


def set_size(d: int, m: int) -> int:
    """Number of pairs with combined L1 weight at most ``(m-1)**2``.

    Uses the hockey-stick identity: ``sum_{q<=Q} C(2d+q-1, q) = C(2d+Q, 2d)``.
    """
    _check_dm(d, m)
    return comb(2 * d + (m - 1) ** 2, 2 * d)


def set_size_by_sum(d: int, m: int) -> int:
    """Same count as :func:`set_size`, summed weight class by weight class."""
    _check_dm(d, m)
    return sum(comb(2 * d + q - 1, q) for q in range((m - 1) ** 2 + 1))


def _check_dm(d: int, m: int) -> None:
    if int(d) != d or d < 1:
        raise ValueError(f"d must be a positive integer, got {d!r}")
    if int(m) != m or m < 2:
        raise ValueError(f"m must be an integer >= 2, got {m!r}")


@lru_cache(maxsize=256)
def _table(d: int, m: int) -> "SetSizeTable":
    return SetSizeTable(d, m)


def table_for(d: int, m: int) -> "SetSizeTable":
    """Shared, cached table for ``(d, m)``."""
    return _table(int(d), int(m))


@dataclass(frozen=True)
class SetSizeTable:
    """Counting data for the alphabet of a fixed ``(d, m)``.

    ``cumulative(q)`` is the number of members of weight at most ``q``.
    Values are computed on demand from the closed form rather than stored
    for every weight, since ``(m-1)**2`` can run into the billions.
    """

    d: int
    m: int
    size: int = field(init=False)
    bit_length: int = field(init=False)

    def __post_init__(self) -> None:
        _check_dm(self.d, self.m)
        size = set_size(self.d, self.m)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "bit_length", (size - 1).bit_length())

    @property
    def max_weight(self) -> int:
        return (self.m - 1) ** 2

    @property
    def parts(self) -> int:
        return 2 * self.d

    def cumulative(self, q: int) -> int:
        """Members of weight ``<= q``; 0 for ``q < 0``."""
        if q < 0:
            return 0
        return comb(self.parts + q, self.parts)

    def weight_count(self, q: int) -> int:
        """Members of weight exactly ``q``."""
        if q < 0:
            return 0
        return comb(self.parts + q - 1, q)


def _composition(a: Sequence[int], b: Sequence[int]) -> list[int]:
    return [int(v) for v in a] + [int(v) for v in b]


def rank(a: Sequence[int], b: Sequence[int], table: SetSizeTable) -> int:
    """Index of ``(a, b)`` in the alphabet, in ``[0, table.size)``."""
    x = _composition(a, b)
    n = table.parts
    if len(x) != n:
        raise MembershipError(f"expected two vectors of length {table.d}, got {len(a)} and {len(b)}")
    if any(v < 0 for v in x):
        raise MembershipError("level indices must be nonnegative")
    q = sum(x)
    if q > table.max_weight:
        raise MembershipError(f"L1 weight {q} exceeds (m-1)^2 = {table.max_weight}")

    total = table.cumulative(q - 1)
    prefix = 0
    val = 0
    prev_c = prev_k = None
    for j in range(n - 1):
        prefix += x[j]
        c, k = prefix + j, j + 1
        steps = x[j]
        if val and (steps <= WALK_STEPS or min(k, c - k) > DIRECT_COMB_LIMIT):
            # C(c', k') -> C(c'+1, k'+1), then walk the top index up to c
            val = val * (prev_c + 1) // (prev_k + 1)
            for top in range(prev_c + 1, c):
                val = val * (top + 1) // (top + 1 - k)
        else:
            val = comb(c, k)
        total += val
        prev_c, prev_k = c, k
    return total


def _largest_top(r: int, k: int, hi: int) -> tuple[int, int]:
    """Largest ``c`` in ``[k-1, hi]`` with ``C(c, k) <= r``, and that ``C(c, k)``.

    Starts from the estimate ``C(c, k) ~ (c - (k-1)/2)**k / k!`` and brackets
    outward, so only a handful of coefficients are evaluated.
    """
    lo = k - 1
    if r == 0 or hi <= lo:
        return lo, comb(lo, k)
    log_est = (math.log(r) + math.lgamma(k + 1)) / k
    if log_est >= math.log(hi + 1):
        guess = hi
    else:
        guess = min(max(int(math.exp(log_est) + (k - 1) / 2), lo), hi)
    if comb(guess, k) <= r:
        lo, step = guess, 1
        while lo + step <= hi and comb(lo + step, k) <= r:
            lo, step = lo + step, step * 2
        hi = min(hi, lo + step - 1)
    else:
        hi, step = guess - 1, 1
        while hi - step >= lo and comb(hi - step, k) > r:
            hi, step = hi - step, step * 2
        lo = max(lo, hi - step)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if comb(mid, k) <= r:
            lo = mid
        else:
            hi = mid - 1
    return lo, comb(lo, k)


def unrank(r: int, table: SetSizeTable) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`rank`."""
    if int(r) != r or r < 0 or r >= table.size:
        raise CorruptMessageError(f"index {r!r} outside [0, {table.size})")
    r = int(r)
    n = table.parts

    # weight class: largest q with C(n + q - 1, n) <= r
    c, _ = _largest_top(r, n, n - 1 + table.max_weight)
    q = c - n + 1
    r -= table.cumulative(q - 1)

    p = [0] * (n - 1)
    hi = q + n - 2
    val = comb(hi, n - 1)  # C(hi, k), carried from level to level
    for k in range(n - 1, 0, -1):
        c = hi
        budget = hi if min(k, hi - k) > DIRECT_COMB_LIMIT else WALK_STEPS
        while val > r and hi - c < budget:
            val = val * (c - k) // c
            c -= 1
        if val > r:
            c, val = _largest_top(r, k, c - 1)
        p[k - 1] = c
        r -= val
        # C(c, k) -> C(c - 1, k - 1) for the next level
        val = val * k // c if c > 0 else 0
        hi = c - 1
    if r != 0:
        raise CorruptMessageError("index did not reduce to zero")

    x = np.empty(n, dtype=np.int64)
    x[0] = p[0]
    for j in range(1, n - 1):
        x[j] = p[j] - p[j - 1] - 1
    x[n - 1] = q - (p[n - 2] - (n - 2))
    return x[: table.d].copy(), x[table.d :].copy()
