"""Fused two-pass attention with online softmax features.

Pass one computes every score tile S = Q K^T * scale, folds it into the
running row max m and rescaled exponential sum ell, and spills the raw tile
to off-chip memory. Pass two reloads each tile, normalizes it with the final
(m, ell) and accumulates P V. Only (m, ell) live on chip between the passes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .precision import WIDE, Precision
from .tiles import OffChipStore, TileSpec, blocks


def mask_value(dtype=np.float64) -> float:
    """Score assigned to causally masked positions."""
    return float(np.finfo(dtype).min)


@dataclass
class SoftmaxFeatures:
    m: np.ndarray
    ell: np.ndarray

    @classmethod
    def empty(cls, rows: int, dtype=np.float64) -> "SoftmaxFeatures":
        return cls(np.full(rows, -np.inf, dtype=dtype), np.zeros(rows, dtype=dtype))

    def copy(self) -> "SoftmaxFeatures":
        return SoftmaxFeatures(self.m.copy(), self.ell.copy())


def online_softmax_update(f: SoftmaxFeatures, s_tile: np.ndarray) -> SoftmaxFeatures:
    """Fold one score tile into the row features.

    Rows whose tile entries are all masked (or empty) are left unchanged.
    """
    s = np.asarray(s_tile, dtype=f.m.dtype)
    if s.ndim != 2 or s.shape[0] != len(f.m):
        raise ValueError(f"tile {s.shape} does not match {len(f.m)} feature rows")
    if not np.all(np.isfinite(s)):
        raise ValueError("score tile must be finite")
    if s.shape[1] == 0:
        return f.copy()
    live = np.any(s > mask_value(s.dtype), axis=1)
    rowmax = s.max(axis=1)
    m_new = np.where(live, np.maximum(f.m, rowmax), f.m)
    with np.errstate(invalid="ignore"):
        old = np.where(np.isneginf(f.m), 0.0, np.exp(f.m - m_new))
        tile_sum = np.exp(s - rowmax[:, None]).sum(axis=1)
        ell_new = np.where(live, old * f.ell + np.exp(rowmax - m_new) * tile_sum, f.ell)
    return SoftmaxFeatures(m_new.astype(f.m.dtype), ell_new.astype(f.ell.dtype))


def normalize_scores(s_tile: np.ndarray, f: SoftmaxFeatures) -> np.ndarray:
    """exp(S - m) / ell for a tile of a fully accumulated row set."""
    if np.any(f.ell <= 0):
        raise ValueError("softmax denominator is zero; row features were never updated")
    s = np.asarray(s_tile, dtype=f.m.dtype)
    return np.exp(s - f.m[:, None]) / f.ell[:, None]


def _head_order(n_heads: int, pairing: bool) -> list[tuple[int, ...]]:
    if not pairing:
        return [(h,) for h in range(n_heads)]
    groups = [(h, h + 1) for h in range(0, n_heads - 1, 2)]
    if n_heads % 2:
        groups.append((n_heads - 1,))
    return groups


def _scores(prec, q_blk, k_blk, scale, qpos, kpos):
    s = prec.cast(prec.matmul(q_blk, k_blk.T) * scale)
    if qpos is not None:
        s = np.where(kpos[None, :] > qpos[:, None], mask_value(s.dtype), s)
    return s


def visible_tiles(q_pos, lq: int, lk: int, tiles: TileSpec) -> np.ndarray:
    """(row block, column block) flags; False for tiles that are entirely masked."""
    rblocks, cblocks = blocks(lq, tiles.b_r), blocks(lk, tiles.b_c)
    if q_pos is None:
        return np.ones((len(rblocks), len(cblocks)), dtype=bool)
    last = np.array([q_pos[rs].max() for rs in rblocks])
    first = np.array([cs.start for cs in cblocks])
    return first[None, :] <= last[:, None]


def score_pass(q, k, tiles: TileSpec, scale: float, store: OffChipStore, prec: Precision = WIDE,
               pairing: bool = True, q_pos: np.ndarray | None = None) -> list[list[SoftmaxFeatures]]:
    """First pass: spill every score tile, return per-(head, row block) features.

    ``q_pos`` gives each query row's sequence position for causal masking
    (key j is visible to a query at position p when j <= p). Tiles with no
    visible key are neither computed nor spilled.
    """
    n_heads, lq, _ = q.shape
    lk = k.shape[1]
    kpos = np.arange(lk)
    rblocks, cblocks = blocks(lq, tiles.b_r), blocks(lk, tiles.b_c)
    live = visible_tiles(q_pos, lq, lk, tiles)
    feats = [[None] * len(rblocks) for _ in range(n_heads)]
    for group in _head_order(n_heads, pairing):
        for i, rs in enumerate(rblocks):
            for h in group:
                feats[h][i] = SoftmaxFeatures.empty(rs.stop - rs.start, prec.dtype)
            for j, cs in enumerate(cblocks):
                if not live[i, j]:
                    continue
                for h in group:
                    s = _scores(prec, q[h, rs], k[h, cs], scale,
                                None if q_pos is None else q_pos[rs], kpos[cs])
                    store.write((h, i, j), s)
                    feats[h][i] = online_softmax_update(feats[h][i], s)
    return feats


def value_pass(feats: list[list[SoftmaxFeatures]], v, lq: int, tiles: TileSpec, store: OffChipStore,
               prec: Precision = WIDE, pairing: bool = True, q_pos: np.ndarray | None = None) -> np.ndarray:
    """Second pass: reload tiles, normalize with the final features, accumulate P V."""
    n_heads, lk, dv = v.shape
    rblocks, cblocks = blocks(lq, tiles.b_r), blocks(lk, tiles.b_c)
    live = visible_tiles(q_pos, lq, lk, tiles)
    out = np.zeros((n_heads, lq, dv))
    for group in _head_order(n_heads, pairing):
        for i, rs in enumerate(rblocks):
            for j, cs in enumerate(cblocks):
                if not live[i, j]:
                    continue
                for h in group:
                    p = normalize_scores(store.read((h, i, j)), feats[h][i])
                    out[h, rs] += prec.matmul(p, v[h, cs])
    return out


def fused_attention(q, k, v, tiles: TileSpec = TileSpec(), scale: float | None = None,
                    pairing: bool = True, causal: bool = False, prec: Precision = WIDE,
                    store: OffChipStore | None = None, q_pos=None) -> np.ndarray:
    """Per-head softmax(Q K^T * scale) V for arrays shaped (heads, rows, d).

    With ``causal`` the query rows are the last rows of the key sequence
    unless ``q_pos`` gives their positions explicitly.
    Heads run in pairs (2h, 2h+1) when ``pairing`` is on; an odd last head
    runs alone.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ValueError("q, k, v must be (heads, rows, d)")
    if k.shape[:2] != v.shape[:2] or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ValueError(f"incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    if causal and q.shape[1] > k.shape[1]:
        raise ValueError("causal attention needs at least as many keys as queries")
    if k.shape[1] == 0:
        raise ValueError("attention over an empty key set")
    scale = 1.0 / np.sqrt(q.shape[2]) if scale is None else scale
    store = OffChipStore() if store is None else store
    if q_pos is not None:
        q_pos = np.asarray(q_pos, dtype=np.int64)
        if q_pos.shape != (q.shape[1],) or np.any(q_pos < 0):
            raise ValueError("q_pos needs one non-negative position per query row")
    elif causal:
        q_pos = k.shape[1] - q.shape[1] + np.arange(q.shape[1])
    feats = score_pass(q, k, tiles, scale, store, prec, pairing, q_pos)
    return value_pass(feats, v, q.shape[1], tiles, store, prec, pairing, q_pos)


def reference_attention(q, k, v, scale: float | None = None, causal: bool = False,
                        q_pos=None) -> np.ndarray:
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    scale = 1.0 / np.sqrt(q.shape[2]) if scale is None else scale
    s = np.einsum("hqd,hkd->hqk", q, k) * scale
    lq, lk = q.shape[1], k.shape[1]
    if q_pos is None and causal:
        q_pos = lk - lq + np.arange(lq)
    if q_pos is not None:
        s = np.where(np.arange(lk)[None, :] > np.asarray(q_pos)[:, None], -np.inf, s)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return np.einsum("hqk,hkd->hqd", p, v)
