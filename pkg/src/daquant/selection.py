"""Loss-threshold gate deciding whether a node transmits a sample."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field


class SelectionKind(str, enum.Enum):
    DISABLED = "disabled"
    THEORY = "theory"
    ADAPTIVE = "adaptive"


@dataclass
class EpochStats:
    transmitted_count: int = 0
    skipped_count: int = 0
    loss_sum: float = 0.0

    def record(self, loss: float, transmitted: bool) -> None:
        if transmitted:
            self.transmitted_count += 1
            self.loss_sum += loss
        else:
            self.skipped_count += 1

    @property
    def mean_transmitted_loss(self) -> float | None:
        if self.transmitted_count == 0:
            return None
        return self.loss_sum / self.transmitted_count


def should_transmit(loss: float, threshold: float) -> bool:
    """Strict comparison: a loss equal to the threshold is skipped."""
    if not math.isfinite(loss) or loss < 0:
        raise ValueError(f"loss must be finite and nonnegative, got {loss!r}")
    return loss > threshold


def theory_threshold(i: int, c: float = 0.25) -> float:
    """``c / i``.  For ``c <= 1/4`` the square roots over ``i = 1..n`` sum to at
    most ``sqrt(n)``."""
    if i < 1:
        raise ValueError(f"iteration index starts at 1, got {i}")
    if c < 0 or c > 0.25:
        raise ValueError(f"c must lie in [0, 1/4], got {c}")
    return c / i


def theory_sqrt_sum(n: int, c: float = 0.25) -> float:
    return math.fsum(math.sqrt(theory_threshold(i, c)) for i in range(1, n + 1))


def adaptive_threshold(prev: EpochStats, alpha: float = 0.2) -> float:
    """``alpha`` times last epoch's mean transmitted loss; 0 if nothing was sent."""
    mean = prev.mean_transmitted_loss
    return 0.0 if mean is None else alpha * mean


@dataclass
class ThresholdPolicy:
    kind: SelectionKind = SelectionKind.DISABLED
    c: float = 0.25
    alpha: float = 0.2
    horizon: int | None = None
    current: float = 0.0
    _epoch: EpochStats = field(default_factory=EpochStats, repr=False)

    def __post_init__(self) -> None:
        self.kind = SelectionKind(self.kind)
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0 <= self.c <= 0.25:
            raise ValueError(f"c must lie in [0, 1/4], got {self.c}")
        if self.kind is SelectionKind.THEORY and self.horizon is not None:
            if theory_sqrt_sum(self.horizon, self.c) > math.sqrt(self.horizon):
                raise ValueError("threshold schedule violates the square-root budget")

    @property
    def enabled(self) -> bool:
        return self.kind is not SelectionKind.DISABLED

    def threshold(self, iteration: int) -> float:
        """Threshold in force for 1-based ``iteration``."""
        if self.kind is SelectionKind.THEORY:
            self.current = theory_threshold(iteration, self.c)
        elif self.kind is SelectionKind.DISABLED:
            self.current = 0.0
        return self.current

    def observe(self, loss: float, transmitted: bool) -> None:
        self._epoch.record(loss, transmitted)

    def end_epoch(self) -> EpochStats:
        stats, self._epoch = self._epoch, EpochStats()
        if self.kind is SelectionKind.ADAPTIVE:
            self.current = adaptive_threshold(stats, self.alpha)
        return stats
