"""Vectorized numpy implementations of the hot numeric kernels.

These mirror the scalar reference in :mod:`pe` and :mod:`dsp` bit for bit and
serve as the fallback when the compiled extension is unavailable.
"""
from __future__ import annotations

import numpy as np

P_MASK = (1 << 48) - 1


def _wrap48(p: np.ndarray) -> np.ndarray:
    p = p & P_MASK
    return np.where(p >> 47, p - (1 << 48), p)


def dual_products(u0, u1, v, width: int = 11):
    """Truncated-overpacking recovery of (u0*v, u1*v) over arrays."""
    u0 = np.asarray(u0, dtype=np.int64)
    u1 = np.asarray(u1, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    n = width
    k = 2 * n - 5
    u1_low = u1 & ((1 << (n - 1)) - 1)
    y = (u1_low & 31) * (v & 31) & 31
    c = (u0 & 1) * v + (y << k) - (((u1 >> (n - 1)) * v) << (3 * n - 6))
    p = _wrap48(((u0 >> 1) - (u1_low << (k - 1))) * (v << 1) + c)
    p0 = p & ((1 << (2 * n)) - 1)
    p1 = ((-(p >> (2 * n))) << 5) + y
    return p0, p1


def _fields(bits: np.ndarray):
    bits = bits.astype(np.int64)
    sign = bits >> 15
    exp = (bits >> 10) & 31
    sig = np.where(exp > 0, 1024 + (bits & 1023), 0)  # subnormals flush to zero
    return sign, exp, sig


def _finalize(total: np.ndarray, scale: np.ndarray) -> np.ndarray:
    val = np.ldexp(total.astype(np.float64), scale.astype(np.int64))
    with np.errstate(over="ignore"):
        h = val.astype(np.float16)
    h = np.where(np.isinf(h), np.copysign(np.float16(65504.0), h), h).astype(np.float16)
    return h.view(np.uint16)


def _align_sum(mant: np.ndarray, exp: np.ndarray, neg: np.ndarray | None):
    live = mant != 0
    shared = np.where(live, exp, np.iinfo(np.int64).min).max(axis=-1)
    shared = np.where(live.any(axis=-1), shared, 0)
    shift = np.minimum(np.where(live, shared[..., None] - exp, 0), 63)
    a = mant >> shift
    if neg is not None:
        a = np.where(neg, -a, a)
    return np.where(live, a, 0).sum(axis=-1), shared


def pe_dot_fp16(xbits, wa_bits, wb_bits, impl: str):
    """Batched column pair; inputs shaped (..., depth) of uint16 bit patterns."""
    sx, ex, gx = _fields(np.asarray(xbits, dtype=np.uint16))
    outs = []
    drop = 0 if impl == "IMPL1" else 7
    for wbits in (wa_bits, wb_bits):
        sw, ew, gw = _fields(np.asarray(wbits, dtype=np.uint16))
        outs.append((sw, ew, gw))
    p0, p1 = dual_products(outs[0][2], outs[1][2], gx)
    res = []
    for (sw, ew, gw), p in zip(outs, (p0, p1)):
        e = np.maximum(ex, 1) + np.maximum(ew, 1) - 30
        total, shared = _align_sum(p >> drop, e, (sx ^ sw).astype(bool))
        res.append(_finalize(total, shared - (20 - drop)))
    return res[0], res[1]


def pe_dot_int4(xbits, wa, wb, impl: str):
    sx, ex, gx = _fields(np.asarray(xbits, dtype=np.uint16))
    sig = np.where(sx == 1, -gx, gx)
    pad = 7 if impl == "IMPL1" else 0
    res = []
    for w in (wa, wb):
        prod = (sig * np.asarray(w, dtype=np.int64)) << pad
        total, shared = _align_sum(prod, np.maximum(ex, 1) - 15, None)
        res.append(_finalize(total, shared - (10 + pad)))
    return res[0], res[1]


def naive_mac(x, w):
    """Chained FP16 multiply-add: exact product, rounding after every add."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    acc = np.zeros(x.shape[:-1], dtype=np.float16)
    with np.errstate(over="ignore"):
        for k in range(x.shape[-1]):
            acc = (acc.astype(np.float64) + x[..., k] * w[..., k]).astype(np.float16)
    return acc
