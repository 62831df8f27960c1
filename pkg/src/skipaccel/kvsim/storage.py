"""KV storage footprint under cross-layer reuse."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dataflow.routing import RouteMask


@dataclass(frozen=True)
class StorageReport:
    stored_entries: int
    dense_entries: int
    entry_bytes: int

    @property
    def stored_bytes(self) -> int:
        return self.stored_entries * self.entry_bytes

    @property
    def dense_bytes(self) -> int:
        return self.dense_entries * self.entry_bytes

    @property
    def reduction_pct(self) -> float:
        return 100.0 * (1 - self.stored_entries / self.dense_entries) if self.dense_entries else 0.0


def kv_storage_accounting(mask: RouteMask | np.ndarray, seq_len: int | None = None,
                          entry_bytes: int = 2 * 4096 * 2) -> StorageReport:
    """Only (layer, token) pairs that executed MHA store a KV entry.

    ``seq_len`` restricts the count to the first tokens of the history.
    """
    mha = mask.mha if isinstance(mask, RouteMask) else np.asarray(mask, dtype=bool)
    if seq_len is not None:
        if not 0 <= seq_len <= mha.shape[1]:
            raise ValueError(f"seq_len {seq_len} outside the mask history")
        mha = mha[:, :seq_len]
    return StorageReport(int(mha.sum()), int(mha.size), entry_bytes)
