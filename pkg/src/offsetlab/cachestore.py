"""Single-slot per-layer activation cache with age tracking and reuse statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NoEligibleSteps


@dataclass
class CacheEntry:
    layer: int
    input: np.ndarray
    output: np.ndarray
    stored_step: int


@dataclass
class CacheStats:
    lookups: int = 0
    hits: int = 0
    misses: int = 0
    stale_evictions: int = 0
    reuse_weight_sum: float = 0.0
    eligible_steps: int = 0
    reuses: int = 0  # binary count: steps whose block was skipped outright

    def merge(self, other: "CacheStats") -> "CacheStats":
        return CacheStats(
            *(getattr(self, k) + getattr(other, k) for k in self.__dataclass_fields__)
        )


class CacheStore:
    """``cache[layer] -> (input, output, step)``.

    Sampling steps count down, so by default the age of an entry is
    ``stored_step - step``. With ``decreasing=False`` the clock counts up
    (used when the cache is carried across video frames).
    """

    def __init__(self, decreasing: bool = True, stats: Optional[CacheStats] = None):
        self.decreasing = decreasing
        self.stats = stats if stats is not None else CacheStats()
        self._entries: dict[int, CacheEntry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def age(self, entry: CacheEntry, step: int) -> int:
        return entry.stored_step - step if self.decreasing else step - entry.stored_step

    def put(self, layer: int, input, output, step: int) -> None:
        self._entries[layer] = CacheEntry(layer, input, output, step)

    def peek(self, layer: int) -> Optional[CacheEntry]:
        return self._entries.get(layer)

    def get(self, layer: int, step: int, tau_max: int) -> Optional[tuple[CacheEntry, int]]:
        self.stats.lookups += 1
        entry = self._entries.get(layer)
        if entry is not None:
            age = self.age(entry, step)
            if age <= tau_max:
                self.stats.hits += 1
                return entry, age
            del self._entries[layer]
            self.stats.stale_evictions += 1
        self.stats.misses += 1
        return None

    def record_reuse(self, lam: float, skipped: bool = False) -> None:
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"weight {lam} outside [0, 1]")
        self.stats.eligible_steps += 1
        self.stats.reuse_weight_sum += 1.0 - lam
        if skipped:
            self.stats.reuses += 1


def hit_rate(stats: CacheStats) -> float:
    """Mean reuse weight ``1 - lambda`` over cache-eligible layer-steps."""
    if stats.eligible_steps < 1:
        raise NoEligibleSteps("no cache-eligible steps recorded")
    return stats.reuse_weight_sum / stats.eligible_steps
