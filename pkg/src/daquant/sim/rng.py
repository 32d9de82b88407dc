"""Counter-addressed random streams.

Every draw in a run comes from a stream keyed by ``(root seed, purpose,
counter...)``, so the order in which node and agent code executes never
changes what any component sees.
"""

from __future__ import annotations

import enum

import numpy as np


class Purpose(enum.IntEnum):
    ORDER = 1       # epoch permutation of the dataset
    QUANT = 2       # stochastic rounding of a sample or gradient
    CORRECTION = 3  # node-private GradCorrQ draws
    SHARED = 4      # randomness shared by node and agent (coordinate choice)
    PROBE = 5       # empirical smoothness probes


def stream(seed: int, purpose: Purpose, *counters: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(purpose), *counters)))


def epoch_order(seed: int, epoch: int, N: int) -> np.ndarray:
    return stream(seed, Purpose.ORDER, epoch).permutation(N)


class SharedCoordinates:
    """Coordinate indices both sides derive from the same seed.

    Draws are generated in blocks so a lookup costs one generator per block.
    """

    BLOCK = 4096

    def __init__(self, seed: int, h: int):
        self.seed = seed
        self.h = h
        self._block = -1
        self._values = np.empty(0, dtype=np.int64)

    def __call__(self, counter: int) -> int:
        block, offset = divmod(counter, self.BLOCK)
        if block != self._block:
            self._values = stream(self.seed, Purpose.SHARED, block).integers(self.h, size=self.BLOCK)
            self._block = block
        return int(self._values[offset])
