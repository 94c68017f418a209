"""
schedule.py
Cubic total-rank budget: flat through warm-up, cubic decay, flat at target
"""
import math
from dataclasses import dataclass

from utils.errors import ConfigError


@dataclass(frozen=True)
class BudgetSchedule:
    b0: int
    bT: int
    warmup_end: int
    decay_end: int
    total_steps: int

    def __post_init__(self):
        problems = []
        if not 0 <= self.bT <= self.b0:
            problems.append(f"budget must satisfy 0 <= bT <= b0, got bT={self.bT}, b0={self.b0}")
        if not 0 <= self.warmup_end < self.decay_end <= self.total_steps:
            problems.append(
                "steps must satisfy 0 <= warmup_end < decay_end <= total_steps, got "
                f"{self.warmup_end} / {self.decay_end} / {self.total_steps}"
            )
        if problems:
            raise ConfigError(problems)

    @classmethod
    def from_epochs(
        cls, n_adaptors: int, r_init: int, r_target: int,
        warmup_epochs: int, decay_end_epoch: int, epochs: int, steps_per_epoch: int,
    ) -> "BudgetSchedule":
        return cls(
            b0=n_adaptors * r_init,
            bT=n_adaptors * r_target,
            warmup_end=warmup_epochs * steps_per_epoch,
            decay_end=decay_end_epoch * steps_per_epoch,
            total_steps=epochs * steps_per_epoch,
        )

    def budget(self, it: int) -> int:
        """b(it); rounding is half-up so the sequence stays monotone"""
        if it <= self.warmup_end:
            return self.b0
        if it >= self.decay_end:
            return self.bT
        remaining = 1.0 - (it - self.warmup_end) / (self.decay_end - self.warmup_end)
        return self.bT + int(math.floor((self.b0 - self.bT) * remaining ** 3 + 0.5))
