"""Fused router + normalization dataflow.

One pass over the reduction tiles of a row block produces both the router
logits and the per-row statistics. Routing then picks the rows that run the
submodule; only those rows are normalized (in place) and multiplied.

Per-row statistics accumulate sum(x) and sum(x^2) across tiles and finalize
var = sum(x^2)/D - (sum(x)/D)^2 after the last tile, the cross-tile consistent
form of the per-tile variance update.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .precision import WIDE, Precision
from .routing import GumbelConfig, RouterParams, gumbel_route
from .tiles import AccessProbe, TileSpec, blocks

EPS = 1e-5


class DegenerateRowError(ValueError):
    """A selected row has zero spread and no epsilon floor."""


@dataclass
class RowStats:
    running_sum: np.ndarray
    running_sum_sq: np.ndarray
    count: int = 0
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None

    @classmethod
    def empty(cls, rows: int, dtype=np.float64) -> "RowStats":
        return cls(np.zeros(rows, dtype=dtype), np.zeros(rows, dtype=dtype))

    def update(self, tile: np.ndarray) -> None:
        self.running_sum += tile.sum(axis=1)
        self.running_sum_sq += (tile * tile).sum(axis=1)
        self.count += tile.shape[1]

    def finalize(self, d: int, rms_only: bool = False) -> "RowStats":
        """mu and sigma = sqrt(max(var, 0)); ``rms_only`` pins mu to zero."""
        if rms_only:
            self.mu = np.zeros_like(self.running_sum)
            var = self.running_sum_sq / d
        else:
            self.mu = self.running_sum / d
            var = self.running_sum_sq / d - self.mu * self.mu
        self.sigma = np.sqrt(np.maximum(var, 0))
        return self

    @property
    def finalized(self) -> bool:
        return self.mu is not None


def router_stats_pass(x_block: np.ndarray, w_theta: np.ndarray, tiles: TileSpec = TileSpec(),
                      prec: Precision = WIDE, probe: AccessProbe | None = None,
                      rms_only: bool = False) -> tuple[np.ndarray, RowStats]:
    """Router logits and finalized row statistics from a single tile sweep."""
    x = np.asarray(x_block, dtype=np.float64)
    w = np.asarray(w_theta, dtype=np.float64)
    if x.ndim != 2 or w.ndim != 2 or w.shape != (x.shape[1], 2):
        raise ValueError(f"row block {x.shape} does not match router weights {w.shape}")
    n, d = x.shape
    logits = np.zeros((n, 2))
    stats = RowStats.empty(n, prec.dtype)
    for k, sl in enumerate(blocks(d, tiles.s)):
        tile = x[:, sl]
        if probe is not None:
            probe.touch(k)
        logits += prec.matmul(tile, w[sl])
        stats.update(prec.cast(tile))
    return logits, stats.finalize(d, rms_only)


def normalize_selected(x_block: np.ndarray, stats: RowStats, gamma, mask, eps: float = EPS) -> np.ndarray:
    """Overwrite the selected rows of ``x_block`` with (x - mu)/sigma * gamma.

    sigma is floored as sqrt(sigma^2 + eps). Unselected rows are left
    untouched. Returns the normalized selected rows.
    """
    if not stats.finalized:
        raise ValueError("row statistics are not finalized")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x_block.shape[0],):
        raise ValueError("mask length must equal the row-block height")
    idx = np.flatnonzero(mask)
    sig2 = stats.sigma[idx].astype(np.float64) ** 2 + eps
    if np.any(sig2 == 0):
        raise DegenerateRowError(f"row {int(idx[np.argmax(sig2 == 0)])} has zero spread")
    gamma = np.asarray(gamma, dtype=np.float64)
    dt = stats.running_sum.dtype
    rows = (x_block[idx].astype(dt) - stats.mu[idx, None]) / np.sqrt(sig2).astype(dt)[:, None] * gamma.astype(dt)
    x_block[idx] = rows
    return x_block[idx]


def fused_router_submodule(x: np.ndarray, router: RouterParams, gamma, w_sub: np.ndarray,
                           tiles: TileSpec = TileSpec(), cfg: GumbelConfig = GumbelConfig(),
                           prec: Precision = WIDE, noise: np.ndarray | None = None,
                           rng: np.random.Generator | None = None, probe: AccessProbe | None = None,
                           rms_only: bool = False, eps: float = EPS,
                           force_execute: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Route every row, then normalize and project the executing rows.

    Returns (execute mask, Y) with Y holding one row per executing token, in
    token order. ``x`` is not modified; the in-place overwrite acts on a
    working copy standing in for the on-chip activation buffer.
    """
    x = np.asarray(x, dtype=np.float64)
    if not hasattr(w_sub, "dequantize"):
        w_sub = np.asarray(w_sub, dtype=np.float64)
    if x.ndim != 2 or len(w_sub.shape) != 2 or w_sub.shape[0] != x.shape[1]:
        raise ValueError(f"activations {x.shape} do not match submodule weights {w_sub.shape}")
    n = x.shape[0]
    if cfg.mode == "sampled" and noise is None:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        noise = rng.gumbel(size=(n, 2))
    work = x.copy()
    mask = np.zeros(n, dtype=bool)
    outs = []
    for b, rs in enumerate(blocks(n, tiles.b_r)):
        blk = work[rs]
        sub_probe = None
        if probe is not None:
            sub_probe = AccessProbe()
        logits, stats = router_stats_pass(blk, router.w_theta, tiles, prec, sub_probe, rms_only)
        if probe is not None:
            for k, v in sub_probe.visits.items():
                probe.visits[(b, k)] += v
        logits = logits + router.bias
        sel = np.ones(len(blk), dtype=bool) if force_execute else \
            gumbel_route(logits, cfg, noise=None if noise is None else noise[rs])
        mask[rs] = sel
        rows = normalize_selected(blk, stats, gamma, sel, eps)
        outs.append(prec.matmul(rows, w_sub))
    y = np.concatenate(outs) if outs else np.zeros((0, w_sub.shape[1]))
    return mask, y


def reference_router_submodule(x, router: RouterParams, gamma, w_sub, cfg: GumbelConfig = GumbelConfig(),
                               noise=None, rng=None, rms_only: bool = False, eps: float = EPS,
                               force_execute: bool = False):
    """Unfused pipeline: route, select, two-pass normalize, project."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.mode == "sampled" and noise is None:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        noise = rng.gumbel(size=(x.shape[0], 2))
    if force_execute:
        mask = np.ones(x.shape[0], dtype=bool)
    else:
        mask = gumbel_route(x @ router.w_theta + router.bias, cfg, noise=noise)
    sel = x[mask]
    mu = np.zeros((len(sel), 1)) if rms_only else sel.mean(axis=1, keepdims=True)
    var = (sel * sel).mean(axis=1, keepdims=True) if rms_only else sel.var(axis=1, keepdims=True)
    w = w_sub.dequantize() if hasattr(w_sub, "dequantize") else np.asarray(w_sub, dtype=np.float64)
    return mask, (sel - mu) / np.sqrt(var + eps) * np.asarray(gamma) @ w
