from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from daquant.problems import project_ball


@dataclass(frozen=True)
class LRSchedule:
    """Piecewise-constant rate: ``base * decay**k`` after the k-th boundary."""

    base: float = 0.1
    decay: float = 1.0
    boundaries: tuple[int, ...] = ()

    def rate(self, step: int) -> float:
        """Rate for the update taking the model from ``step`` to ``step + 1``."""
        k = sum(1 for b in self.boundaries if step >= b)
        return self.base * self.decay**k


@dataclass
class ModelState:
    w: np.ndarray
    schedule: LRSchedule = field(default_factory=LRSchedule)
    momentum: float = 0.0
    radius: float | None = None
    step: int = 0
    momentum_buf: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        self.w = project_ball(np.array(self.w, dtype=np.float64), self.radius)
        if self.momentum_buf is None:
            self.momentum_buf = np.zeros_like(self.w)

    def apply(self, g: np.ndarray) -> None:
        lr = self.schedule.rate(self.step)
        if self.momentum:
            self.momentum_buf = self.momentum * self.momentum_buf + g
            g = self.momentum_buf
        self.w = project_ball(self.w - lr * g, self.radius)
        self.step += 1

    def skip(self) -> None:
        self.step += 1
