"""Batch kernels with import-time backend selection.

The compiled extension is used when it imports; otherwise the numpy
implementation takes over. ``SKIPACCEL_BACKEND=python`` forces the fallback.
Both backends are bit-identical (checked by the test suite).
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py as _py

try:
    if os.environ.get("SKIPACCEL_BACKEND", "").lower() == "python":
        raise ImportError("fallback forced")
    from . import _ckernels as _c
except ImportError:
    _c = None

BACKEND = "compiled" if _c is not None else "python"
_impl = _c if _c is not None else _py


def backends() -> dict:
    out = {"python": _py}
    if _c is not None:
        out["compiled"] = _c
    return out


def dual_products(u0, u1, v, width: int = 11):
    return _impl.dual_products(u0, u1, v, width)


def pe_dot_fp16(xbits, wa_bits, wb_bits=None, impl: str = "IMPL1"):
    """Column pair over batched uint16 bit patterns shaped (..., depth).

    With ``wb_bits`` omitted a single column is returned.
    """
    if impl not in ("IMPL1", "IMPL2", "IMPL3"):
        raise ValueError(f"unknown impl {impl!r}")
    single = wb_bits is None
    a, b = _impl.pe_dot_fp16(xbits, wa_bits, wa_bits if single else wb_bits, impl)
    return a if single else (a, b)


def pe_dot_int4(xbits, wa, wb=None, impl: str = "IMPL1"):
    if impl not in ("IMPL1", "IMPL2", "IMPL3"):
        raise ValueError(f"unknown impl {impl!r}")
    wa = np.asarray(wa)
    if wa.size and (wa.min() < -8 or wa.max() > 7):
        raise ValueError("INT4 weights out of range")
    single = wb is None
    a, b = _impl.pe_dot_int4(xbits, wa, wa if single else wb, impl)
    return a if single else (a, b)


naive_mac = _py.naive_mac
