"""Per-output-channel symmetric INT4 weight quantization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QuantizedWeight:
    """Weights ``q * scale`` with q in [-8, 7] and one FP16 scale per column."""
    q: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if self.q.ndim != 2 or self.scale.shape != (self.q.shape[1],):
            raise ValueError("need a 2-D INT4 matrix and one scale per output column")
        if self.q.size and (self.q.min() < -8 or self.q.max() > 7):
            raise ValueError("INT4 codes out of range")

    @property
    def shape(self) -> tuple[int, int]:
        return self.q.shape

    def dequantize(self) -> np.ndarray:
        return self.q.astype(np.float64) * self.scale.astype(np.float64)

    def __getitem__(self, idx) -> "QuantizedWeight":
        """Row slice (reduction-dimension tile)."""
        return QuantizedWeight(self.q[idx], self.scale)


def quantize_int4(w: np.ndarray) -> QuantizedWeight:
    w = np.asarray(w, dtype=np.float64)
    amax = np.abs(w).max(axis=0)
    scale = np.where(amax > 0, amax / 7.0, 1.0).astype(np.float16)
    s = scale.astype(np.float64)
    q = np.clip(np.rint(w / s), -8, 7).astype(np.int8)
    return QuantizedWeight(q, scale)


