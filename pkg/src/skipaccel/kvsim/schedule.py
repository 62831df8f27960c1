"""Round-based KV fetch scheduling.

Each attention event (one decode step at one layer) turns its needed entries
into a stream of fetches: HBM reads, invariance-buffer reads and the HBM
write of the decode token's fresh KV entry. Fetches are packed into rounds
first-fit, each entry going to the earliest legal round within a trailing
window:

* buffer valid (Case-1): HBM fetches in a round touch disjoint ports and at
  most ``n_read_ports`` entries come from the buffer. An HBM read whose entry
  must also be pinned for the next layer needs a free buffer write port.
* buffer invalid (Case-2): HBM fetches in a round touch disjoint physical
  channels. Proactive writes use a free write port when one exists and are
  dropped otherwise.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .buffer import InvarianceBuffer, retention_set
from .config import KvSimConfig
from .layout import LayoutError, chunk_plan, region_beats, slot_table
from .trace import TraceError

try:
    if os.environ.get("SKIPACCEL_BACKEND", "").lower() == "python":
        raise ImportError("python backend forced")
    from . import _csched as _sched
    BACKEND = "cython"
except ImportError:
    from . import _sched_py as _sched
    BACKEND = "python"

HBM_READ, BUFFER_READ, HBM_WRITE = 0, 1, 2


class ScheduleError(AssertionError):
    """An emitted schedule violates a legality or completeness rule."""


class LayoutBook:
    """Vectorized port / channel / address lookup for one policy and mask."""

    def __init__(self, mha_exec: np.ndarray, policy: str, cfg: KvSimConfig):
        self.mha = np.asarray(mha_exec, dtype=bool)
        self.policy = policy
        self.cfg = cfg
        self.plan = chunk_plan(policy, cfg)
        self.slots = slot_table(self.mha, policy)
        L, T = self.mha.shape
        self.region = region_beats(T, policy, cfg)
        if self.region * L * cfg.hbm.beat_bytes > cfg.hbm.port_capacity_bytes:
            raise LayoutError("KV cache exceeds the per-port address space")
        n = cfg.hbm.n_ports
        chan = cfg.hbm.channel_map()
        pm = np.zeros(n, dtype=np.uint64)
        cm = np.zeros(n, dtype=np.uint64)
        for start in range(n):
            ports = {(start + q) % n for q in range(min(self.plan.n_chunks, n))}
            pm[start] = sum(1 << p for p in ports)
            cm[start] = sum(1 << c for c in {chan[p] for p in ports})
        self._pmask = pm
        self._cmask = cm

    def locate(self, layers: np.ndarray, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(first chunk index, layer base address) per entry."""
        s = self.slots[layers, tokens]
        if np.any(s < 0):
            k = int(np.argmax(s < 0))
            raise TraceError(f"token {int(tokens[k])} has no KV entry stored at layer {int(layers[k])}")
        return s * self.plan.n_chunks, layers.astype(np.int64) * self.region

    def masks(self, g0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        start = g0 % self.cfg.hbm.n_ports
        return self._pmask[start], self._cmask[start]

    def ports(self, g0: int) -> tuple[int, ...]:
        m = int(self._pmask[int(g0) % self.cfg.hbm.n_ports])
        return tuple(p for p in range(self.cfg.hbm.n_ports) if m >> p & 1)


@dataclass
class EventPlan:
    """Fetch stream of one attention event, in issue order."""
    tokens: np.ndarray
    prov: np.ndarray
    src: np.ndarray
    g0: np.ndarray
    base: np.ndarray
    port_mask: np.ndarray
    chan_mask: np.ndarray
    want_write: np.ndarray
    rnd: np.ndarray
    wrote: np.ndarray
    n_rounds: int
    case1: bool
    evictions: int
    residency: dict[int, int]


def plan_event(book: LayoutBook, layer: int, tokens, prov, buffer: InvarianceBuffer | None,
               next_exec: np.ndarray | None, write_token: int | None = None) -> EventPlan:
    """Schedule one attention event and advance the buffer state.

    ``buffer`` None disables the invariance buffer. ``next_exec`` is the
    look-ahead MHA mask of layer+1 (None on the last layer). ``write_token``
    appends the HBM write of that token's new KV entry at this layer.
    """
    cfg = book.cfg
    tokens = np.asarray(tokens, dtype=np.int64)
    prov = np.asarray(prov, dtype=np.int64)
    if len(tokens) != len(prov):
        raise TraceError("needed tokens and provenance differ in length")
    n = len(tokens)
    use_buffer = buffer is not None
    case1 = use_buffer and buffer.valid
    cross = prov != layer
    if case1 and n:
        res = buffer.residency
        held = np.fromiter((res.get(t, -1) for t in tokens.tolist()), dtype=np.int64, count=n)
        inbuf = cross & (held == prov)
    else:
        inbuf = np.zeros(n, dtype=bool)
    src = np.where(inbuf, BUFFER_READ, HBM_READ).astype(np.int8)

    evictions = 0
    if use_buffer and next_exec is not None:
        reuse = ~np.asarray(next_exec, dtype=bool)[tokens]
        keep, evictions = retention_set(tokens, prov, reuse, cfg.buffer.capacity_tokens)
    else:
        keep = np.zeros(n, dtype=bool)
    want = (keep & ~inbuf).astype(np.int8)

    layers = prov
    toks = tokens
    if write_token is not None:
        layers = np.append(prov, layer)
        toks = np.append(tokens, int(write_token))
        src = np.append(src, np.int8(HBM_WRITE))
        want = np.append(want, np.int8(0))
    g0, base = book.locate(layers, toks)
    pm, cm = book.masks(g0)
    rnd, wrote, n_rounds = _sched.first_fit(
        np.ascontiguousarray(pm), np.ascontiguousarray(cm), np.ascontiguousarray(src),
        np.ascontiguousarray(want), bool(case1), cfg.buffer.n_read_ports,
        cfg.buffer.n_write_ports, cfg.window_rounds)
    wrote = np.asarray(wrote)

    residency: dict[int, int] = {}
    if use_buffer:
        kept = keep & (inbuf | (wrote[:n] != 0))
        residency = dict(zip(tokens[kept].tolist(), prov[kept].tolist()))
        buffer.evictions += evictions
        buffer.dropped_updates += int(np.count_nonzero(want[:n] & (wrote[:n] == 0)))
        buffer.residency = residency
        buffer.valid = next_exec is not None
    return EventPlan(toks, layers, src, g0, base, pm, cm, want, np.asarray(rnd), wrote,
                     int(n_rounds), bool(case1), evictions, residency)


@dataclass
class RoundSchedule:
    round_index: int
    hbm_fetches: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    buffer_reads: list[int] = field(default_factory=list)
    proactive_writes: list[int] = field(default_factory=list)
    kv_writes: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    case1: bool = False

    @property
    def width(self) -> int:
        """Entries consumed by attention in this round."""
        return len(self.hbm_fetches) + len(self.buffer_reads)


def rounds_from_plan(book: LayoutBook, ev: EventPlan) -> list[RoundSchedule]:
    out = [RoundSchedule(r, case1=ev.case1) for r in range(ev.n_rounds)]
    for k in range(len(ev.tokens)):
        rs = out[int(ev.rnd[k])]
        t = int(ev.tokens[k])
        if ev.src[k] == BUFFER_READ:
            rs.buffer_reads.append(t)
            continue
        entry = (t, book.ports(ev.g0[k]))
        if ev.src[k] == HBM_WRITE:
            rs.kv_writes.append(entry)
        else:
            rs.hbm_fetches.append(entry)
            if ev.wrote[k]:
                rs.proactive_writes.append(t)
    return out


def schedule_attention(needed, buffer: InvarianceBuffer | None, book: LayoutBook, layer: int,
                       next_exec: np.ndarray | None = None,
                       write_token: int | None = None) -> list[RoundSchedule]:
    """Rounds serving ``needed`` = [(token, provenance_layer), ...] at ``layer``."""
    arr = np.asarray(list(needed), dtype=np.int64).reshape(-1, 2)
    ev = plan_event(book, layer, arr[:, 0], arr[:, 1], buffer, next_exec, write_token)
    return rounds_from_plan(book, ev)


def check_rounds(rounds: list[RoundSchedule], needed, cfg: KvSimConfig) -> None:
    """Raise ScheduleError on any legality or completeness violation."""
    chan = cfg.hbm.channel_map()
    served: list[int] = []
    for rs in rounds:
        if len(rs.buffer_reads) > cfg.buffer.n_read_ports:
            raise ScheduleError(f"round {rs.round_index}: {len(rs.buffer_reads)} buffer reads")
        if len(rs.proactive_writes) > cfg.buffer.n_write_ports:
            raise ScheduleError(f"round {rs.round_index}: {len(rs.proactive_writes)} buffer writes")
        fetched = {t for t, _ in rs.hbm_fetches}
        if not set(rs.proactive_writes) <= fetched:
            raise ScheduleError(f"round {rs.round_index}: write of an entry not fetched in the round")
        used: set[int] = set()
        for t, ports in rs.hbm_fetches + rs.kv_writes:
            keys = set(ports) if rs.case1 else {chan[p] for p in ports}
            if used & keys:
                what = "port" if rs.case1 else "channel"
                raise ScheduleError(f"round {rs.round_index}: token {t} shares a {what}")
            used |= keys
        served += [t for t, _ in rs.hbm_fetches] + rs.buffer_reads
    want = sorted(int(t) for t, _ in needed)
    if sorted(served) != want:
        raise ScheduleError("needed entries not served exactly once")
