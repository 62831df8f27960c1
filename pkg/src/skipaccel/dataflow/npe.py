"""Nonlinear processing kernels: exp/div primitives, SwiGLU and RoPE."""
from __future__ import annotations

import numpy as np


def npe_exp(x, dtype=np.float64) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.exp(np.asarray(x, dtype=dtype))


def npe_div(a, b, dtype=np.float64) -> np.ndarray:
    return np.asarray(a, dtype=dtype) / np.asarray(b, dtype=dtype)


def silu(z, dtype=np.float64) -> np.ndarray:
    """z / (1 + e^-z) built from the exponential and division primitives."""
    z = np.asarray(z, dtype=dtype)
    return npe_div(z, 1 + npe_exp(-z, dtype), dtype)


def swiglu(gate_tile, up_tile, dtype=np.float64) -> np.ndarray:
    g = np.asarray(gate_tile)
    u = np.asarray(up_tile)
    if g.shape != u.shape:
        raise ValueError(f"gate {g.shape} and up {u.shape} tiles differ")
    return silu(g, dtype) * u.astype(dtype)


def interleave_gate_up(w_gate: np.ndarray, w_up: np.ndarray, tile: int) -> np.ndarray:
    """Column-interleave gate and up weights in blocks of ``tile`` columns."""
    if w_gate.shape != w_up.shape or w_gate.shape[1] % tile:
        raise ValueError("gate/up weights must match and split into whole tiles")
    d, f = w_gate.shape
    g = w_gate.reshape(d, f // tile, 1, tile)
    u = w_up.reshape(d, f // tile, 1, tile)
    return np.concatenate([g, u], axis=2).reshape(d, 2 * f)


def split_gate_up(h: np.ndarray, tile: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of the interleave on the product columns."""
    n, f2 = h.shape
    hh = h.reshape(n, f2 // (2 * tile), 2, tile)
    return hh[:, :, 0].reshape(n, -1), hh[:, :, 1].reshape(n, -1)


def rope_table(max_pos: int, d: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """(cos, sin) of shape (max_pos, d/2) for pair index j at angle pos * base^(-2j/d)."""
    if d % 2:
        raise ValueError("rotary dimension must be even")
    inv = base ** (-np.arange(0, d, 2) / d)
    ang = np.arange(max_pos)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def rope_apply(rows, positions, table, mask=None) -> np.ndarray:
    """Rotate (even, odd) element pairs of the selected rows by their positions."""
    x = np.array(rows, dtype=np.float64)
    cos, sin = table
    pos = np.asarray(positions, dtype=np.int64)
    if pos.shape != (x.shape[0],):
        raise ValueError("one position per row required")
    if x.shape[1] != 2 * cos.shape[1]:
        raise ValueError("row width does not match the rotation table")
    sel = np.ones(len(x), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if np.any((pos[sel] < 0) | (pos[sel] >= cos.shape[0])):
        raise IndexError("position outside the rotation table")
    idx = np.flatnonzero(sel)
    c, s = cos[pos[idx]], sin[pos[idx]]
    ev, od = x[idx, 0::2].copy(), x[idx, 1::2].copy()
    x[idx, 0::2] = ev * c - od * s
    x[idx, 1::2] = ev * s + od * c
    return x
