"""Numeric modes shared by the dataflow kernels.

``wide``: binary64 everywhere, used for exact equivalence checks.
``device``: every matmul goes through the emulated PE column (64-deep BFP
dot products on FP16 operands); nonlinear math runs in binary32. Partial
dot products of successive 64-lane columns are summed in binary32.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics.fp16 import FP16_MAX, to_fp16_bits, from_fp16_bits
from ..numerics.kernels import pe_dot_fp16, pe_dot_int4
from ..numerics.quant import QuantizedWeight

MODES = ("wide", "device")
PE_DEPTH = 64


def device_matmul(a: np.ndarray, b, impl: str = "IMPL1") -> np.ndarray:
    """a @ b with each output computed by emulated PE columns.

    INT4 weights use the FP16 x INT4 mode and apply the column scale after
    the dot product.
    """
    a = np.asarray(a, dtype=np.float64)
    quant = isinstance(b, QuantizedWeight)
    quant_w = b
    b = b.q if quant else np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    n, k = a.shape
    m = b.shape[1]
    if n == 0 or m == 0:
        return np.zeros((n, m))
    pad = -k % PE_DEPTH if k else PE_DEPTH
    kk = (k + pad) // PE_DEPTH
    xa = np.pad(np.clip(a, -FP16_MAX, FP16_MAX), ((0, 0), (0, pad)))
    xbits = to_fp16_bits(xa).reshape(n, 1, kk, PE_DEPTH)
    if quant:
        wq = np.pad(b, ((0, pad), (0, 0))).T.reshape(1, m, kk, PE_DEPTH)
        xbits, wq = np.broadcast_arrays(xbits, wq)
        out = pe_dot_int4(np.ascontiguousarray(xbits), np.ascontiguousarray(wq).astype(np.int8), impl=impl)
    else:
        wb = np.pad(np.clip(b, -FP16_MAX, FP16_MAX), ((0, pad), (0, 0)))
        wbits = to_fp16_bits(wb.T).reshape(1, m, kk, PE_DEPTH)
        xbits, wbits = np.broadcast_arrays(xbits, wbits)
        out = pe_dot_fp16(np.ascontiguousarray(xbits), np.ascontiguousarray(wbits), impl=impl)
    part = from_fp16_bits(out).astype(np.float32)
    y = part.sum(axis=-1, dtype=np.float32)
    if quant:
        y = y * quant_w.scale.astype(np.float32)
    return y.astype(np.float64)


@dataclass(frozen=True)
class Precision:
    mode: str = "wide"
    impl: str = "IMPL1"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown numeric mode {self.mode!r}")

    @property
    def dtype(self):
        """Float type for nonlinear arithmetic."""
        return np.float64 if self.mode == "wide" else np.float32

    def matmul(self, a, b) -> np.ndarray:
        if self.mode == "wide":
            if isinstance(b, QuantizedWeight):
                b = b.dequantize()
            return np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)
        return device_matmul(a, b, self.impl)

    def cast(self, x) -> np.ndarray:
        return np.asarray(x, dtype=self.dtype)


WIDE = Precision("wide")
DEVICE = Precision("device")
