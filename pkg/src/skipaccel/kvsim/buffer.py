"""On-chip invariance buffer holding KV entries reused at the next layer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import BufferConfig


@dataclass
class InvarianceBuffer:
    """Residency map token -> provenance layer plus a validity flag.

    ``valid`` means the contents were prepared for the layer about to be
    decoded. Skipping attention at a layer leaves no chance to refresh the
    buffer, so it is invalidated.
    """
    config: BufferConfig = field(default_factory=BufferConfig)
    residency: dict[int, int] = field(default_factory=dict)
    valid: bool = False
    evictions: int = 0
    dropped_updates: int = 0

    def __post_init__(self):
        if len(self.residency) > self.config.capacity_tokens:
            raise ValueError("residency exceeds buffer capacity")

    def holds(self, token: int, prov: int) -> bool:
        return self.residency.get(int(token), -1) == int(prov)

    def invalidate(self) -> None:
        self.valid = False
        self.residency = {}

    def reset(self) -> None:
        self.invalidate()


def retention_set(tokens: np.ndarray, prov: np.ndarray, reused_next: np.ndarray,
                  capacity: int) -> tuple[np.ndarray, int]:
    """Boolean keep-mask over needed entries plus the number evicted.

    Candidates are entries that the next layer reuses. When they exceed the
    capacity, the oldest provenance layers are dropped first (ties broken by
    lower token index).
    """
    keep = np.asarray(reused_next, dtype=bool).copy()
    n = int(keep.sum())
    if n <= capacity:
        return keep, 0
    idx = np.flatnonzero(keep)
    order = np.lexsort((np.asarray(tokens)[idx], np.asarray(prov)[idx]))
    keep[idx[order[:n - capacity]]] = False
    return keep, n - capacity


def lookahead_update(buffer: InvarianceBuffer, next_layer_exec: np.ndarray | None,
                     tokens, prov, in_flight=None) -> dict[int, int]:
    """Residency for the next layer, computed while the current layer decodes.

    Keeps exactly the observed entries (served from the buffer or arriving
    from HBM this layer) that the next layer reuses. ``in_flight`` flags which
    of ``tokens`` are observable; by default all of them are. Entries not
    observable cannot be captured. The update consumes no round time.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    prov = np.asarray(prov, dtype=np.int64)
    if next_layer_exec is None:
        buffer.residency = {}
        return buffer.residency
    seen = np.ones(len(tokens), dtype=bool) if in_flight is None else np.asarray(in_flight, dtype=bool)
    reused = ~np.asarray(next_layer_exec, dtype=bool)[tokens] & seen
    keep, ev = retention_set(tokens, prov, reused, buffer.config.capacity_tokens)
    buffer.evictions += ev
    buffer.residency = dict(zip(tokens[keep].tolist(), prov[keep].tolist()))
    buffer.valid = True
    return buffer.residency
