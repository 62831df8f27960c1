"""Token -> (HBM port, port-local address) mapping policies.

Every policy stores a layer's KV entries in a private per-layer region of
each port. Within that region an entry is cut into chunks that are dealt
round-robin over the ports:

* ``token_wise``: one chunk spanning the whole entry, so the i-th stored
  token lives entirely on port ``i mod n_ports``.
* ``interleaved_skip`` / ``dense_interleaved``: chunks of
  ``interleave_beats`` striped over all ports.

``dense_interleaved`` reserves a slot for every token at every layer (the
layout of a model that never skips); the other two policies compact the
tokens that actually executed MHA at that layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import KvSimConfig

POLICIES = ("dense_interleaved", "interleaved_skip", "token_wise")


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class ChunkPlan:
    chunk_beats: int
    n_chunks: int


def chunk_plan(policy: str, cfg: KvSimConfig) -> ChunkPlan:
    span = cfg.span_beats
    if policy == "token_wise":
        return ChunkPlan(span, 1)
    if policy not in POLICIES:
        raise LayoutError(f"unknown mapping policy {policy!r}")
    c = min(cfg.hbm.interleave_beats, span)
    if span % c:
        raise LayoutError(f"entry of {span} beats does not split into {c}-beat chunks")
    return ChunkPlan(c, span // c)


def slot_table(mha_exec: np.ndarray, policy: str) -> np.ndarray:
    """slot[l, i]: position of token i inside layer l's region, -1 if absent."""
    ex = np.asarray(mha_exec, dtype=bool)
    if policy == "dense_interleaved":
        return np.broadcast_to(np.arange(ex.shape[1]), ex.shape).astype(np.int64)
    if policy not in POLICIES:
        raise LayoutError(f"unknown mapping policy {policy!r}")
    return np.where(ex, np.cumsum(ex, axis=1) - 1, -1).astype(np.int64)


def region_beats(n_tokens: int, policy: str, cfg: KvSimConfig) -> int:
    """Per-port beats reserved for one layer, rounded up to whole pages."""
    plan = chunk_plan(policy, cfg)
    n = cfg.hbm.n_ports
    chunks = n_tokens * plan.n_chunks
    rows = -(-chunks // n)
    page = cfg.hbm.page_beats
    return max(page, -(-rows * plan.chunk_beats // page) * page)


@dataclass(frozen=True)
class KvLayout:
    policy: str
    layer: int
    tokens: np.ndarray
    ports: np.ndarray
    base_address: np.ndarray
    token_span_beats: int
    chunk_beats: int
    n_chunks: int

    def ports_of(self, k: int, n_ports: int) -> list[int]:
        """All ports touched by the k-th stored entry."""
        first = int(self.ports[k])
        return sorted({(first + j) % n_ports for j in range(self.n_chunks)})


def map_tokens(mha_exec: np.ndarray, layer: int, policy: str, cfg: KvSimConfig = KvSimConfig(),
               n_layers: int | None = None) -> KvLayout:
    """Port/address assignment for the entries stored at ``layer``."""
    ex = np.asarray(mha_exec, dtype=bool)
    n_layers = ex.shape[0] if n_layers is None else n_layers
    plan = chunk_plan(policy, cfg)
    reg = region_beats(ex.shape[1], policy, cfg)
    if reg * n_layers * cfg.hbm.beat_bytes > cfg.hbm.port_capacity_bytes:
        raise LayoutError("KV cache exceeds the per-port address space")
    slots = slot_table(ex, policy)[layer]
    tokens = np.flatnonzero(slots >= 0)
    g0 = slots[tokens] * plan.n_chunks
    n = cfg.hbm.n_ports
    return KvLayout(policy, layer, tokens, g0 % n, layer * reg + (g0 // n) * plan.chunk_beats,
                    cfg.span_beats, plan.chunk_beats, plan.n_chunks)
