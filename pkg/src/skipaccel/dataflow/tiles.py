"""Tile geometry and access probes."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TileSpec:
    """Row block b_r, column block b_c and reduction tile s."""
    b_r: int = 4
    b_c: int = 4
    s: int = 8

    def __post_init__(self):
        for name in ("b_r", "b_c", "s"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")


def blocks(n: int, size: int) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def pad_to(x: np.ndarray, multiple: int, axis: int) -> np.ndarray:
    """Zero-pad ``axis`` up to a multiple; zeros are no-ops for every reduction used."""
    extra = -x.shape[axis] % multiple
    if not extra:
        return x
    widths = [(0, 0)] * x.ndim
    widths[axis] = (0, extra)
    return np.pad(x, widths)


@dataclass
class AccessProbe:
    """Counts visits per tile key."""
    visits: Counter = field(default_factory=Counter)

    def touch(self, key) -> None:
        self.visits[key] += 1

    def each_once(self) -> bool:
        return bool(self.visits) and set(self.visits.values()) == {1}


@dataclass
class OffChipStore:
    """Modeled off-chip buffer for spilled score tiles with I/O counters."""
    data: dict = field(default_factory=dict)
    writes: Counter = field(default_factory=Counter)
    reads: Counter = field(default_factory=Counter)

    def write(self, key, tile: np.ndarray) -> None:
        self.writes[key] += 1
        self.data[key] = np.array(tile, copy=True)

    def read(self, key) -> np.ndarray:
        self.reads[key] += 1
        return self.data[key]

    def balanced(self) -> bool:
        """Every tile written once and read once."""
        return (bool(self.writes) and set(self.writes.values()) == {1}
                and self.reads == self.writes)
