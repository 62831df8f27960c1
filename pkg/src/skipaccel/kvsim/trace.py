"""KV access traces: in-memory form, synthesis from route masks, text I/O.

Text grammar (one record per decode step and layer, in step then layer
order; blank lines and ``#`` comments are ignored)::

    record    := step SP layer SP attend SP lookahead SP needed
    step      := decimal position of the token being decoded
    layer     := decimal layer index
    attend    := "0" | "1"        (does this token run MHA at this layer)
    lookahead := hex | "-"        (MHA execute bits of layer+1 for tokens
                                   0..step-1, bit i = token i; "-" on the
                                   last layer)
    needed    := "needed:" [pair ("," pair)*]
    pair      := "(" token "," provenance_layer ")"

An attending record lists every preceding token exactly once, in order,
with the layer its KV entry comes from.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dataflow.routing import RouteMask, provenance_table


class TraceError(ValueError):
    """Inconsistent trace content."""


class TraceParseError(TraceError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass
class TraceRecord:
    step: int
    layer: int
    attend: bool
    lookahead: np.ndarray | None
    needed_tokens: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    needed_prov: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def current(self) -> np.ndarray:
        """Per needed entry: produced at this very layer (not reused)."""
        return self.needed_prov == self.layer


@dataclass
class AccessTrace:
    n_layers: int
    records: list[TraceRecord]

    @property
    def steps(self) -> list[int]:
        return sorted({r.step for r in self.records})

    @property
    def n_tokens(self) -> int:
        return max(self.steps) + 1 if self.records else 0

    def mha_mask(self) -> np.ndarray:
        """Rebuild the MHA execute matrix implied by the records.

        Raises TraceError when records disagree with each other or with the
        provenance recursion.
        """
        return validate_trace(self)


def trace_from_mask(mask: RouteMask | np.ndarray, positions) -> AccessTrace:
    """Records for decoding the tokens at ``positions`` under ``mask``."""
    mha = mask.mha if isinstance(mask, RouteMask) else np.asarray(mask, dtype=bool)
    L, T = mha.shape
    prov = provenance_table(mha)
    recs = []
    for t in positions:
        t = int(t)
        if not 0 < t < T:
            raise TraceError(f"decode position {t} outside 1..{T - 1}")
        toks = np.arange(t, dtype=np.int64)
        for l in range(L):
            look = mha[l + 1, :t].copy() if l + 1 < L else None
            if mha[l, t]:
                recs.append(TraceRecord(t, l, True, look, toks, prov[l, :t].copy()))
            else:
                recs.append(TraceRecord(t, l, False, look))
    return AccessTrace(L, recs)


def synthetic_trace(n_layers: int, prefill_len: int, decode_len: int, skip_prob: float,
                    seed: int = 0, stride: int = 1) -> tuple[AccessTrace, RouteMask]:
    """Bernoulli skip trace: decode positions prefill_len, +stride, ... ."""
    rng = np.random.default_rng(seed)
    mask = RouteMask.bernoulli(n_layers, prefill_len + decode_len, skip_prob, rng)
    pos = range(prefill_len, prefill_len + decode_len, stride)
    return trace_from_mask(mask, pos), mask


def validate_trace(trace: AccessTrace) -> np.ndarray:
    L = trace.n_layers
    T = trace.n_tokens
    known = np.zeros((L, T), dtype=bool)
    mha = np.zeros((L, T), dtype=bool)
    mha[0] = True
    known[0] = True

    def put(l, idx, bits, what):
        clash = known[l, idx] & (mha[l, idx] != bits)
        if clash.any():
            raise TraceError(f"{what}: layer {l} decision for token {int(idx[np.argmax(clash)])} "
                             "contradicts an earlier record")
        mha[l, idx] = bits
        known[l, idx] = True

    recs = trace.records
    if len(recs) % L:
        raise TraceError(f"{len(recs)} records do not form whole steps of {L} layers")
    prev = -1
    for k in range(0, len(recs), L):
        group = recs[k:k + L]
        step = group[0].step
        if step <= prev:
            raise TraceError(f"step {step}: decode positions must increase")
        prev = step
        for l, r in enumerate(group):
            if r.step != step or r.layer != l:
                raise TraceError(f"step {step}: expected layer {l}, found step {r.step} layer {r.layer}")
    for r in recs:
        put(r.layer, np.array([r.step]), np.array([bool(r.attend)]), f"step {r.step}")
        if r.layer + 1 < L:
            if r.lookahead is None or len(r.lookahead) != r.step:
                raise TraceError(f"step {r.step} layer {r.layer}: look-ahead mask must cover {r.step} tokens")
            put(r.layer + 1, np.arange(r.step), np.asarray(r.lookahead, dtype=bool), f"step {r.step}")
        elif r.lookahead is not None:
            raise TraceError(f"step {r.step}: last layer carries no look-ahead mask")
    if not mha[0].all():
        raise TraceError("layer 0 must execute for every token")

    prov = provenance_table(mha)
    for r in trace.records:
        if not r.attend:
            if len(r.needed_tokens):
                raise TraceError(f"step {r.step} layer {r.layer}: skipped attention lists needed entries")
            continue
        if len(r.needed_tokens) != r.step or np.any(r.needed_tokens != np.arange(r.step)):
            raise TraceError(f"step {r.step} layer {r.layer}: needed list must be tokens 0..{r.step - 1}")
        want = prov[r.layer, :r.step]
        bad = np.flatnonzero(r.needed_prov != want)
        if bad.size:
            i = int(bad[0])
            raise TraceError(f"step {r.step} layer {r.layer}: token {i} provenance {int(r.needed_prov[i])}, "
                             f"route mask says {int(want[i])}")
    return mha


# -- text form ------------------------------------------------------------

def _bits_to_hex(bits: np.ndarray) -> str:
    if bits is None:
        return "-"
    if len(bits) == 0:
        return "0"
    packed = np.packbits(np.asarray(bits, dtype=bool), bitorder="little").tobytes()
    return format(int.from_bytes(packed, "little"), "x")


def _hex_to_bits(text: str, n: int) -> np.ndarray:
    v = int(text, 16)
    if v >> n:
        raise ValueError(f"bitmask has bits beyond token {n - 1}")
    raw = v.to_bytes(max(1, (n + 7) // 8), "little")
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")[:n].astype(bool)


def format_trace(trace: AccessTrace) -> str:
    lines = [f"# kv access trace, layers={trace.n_layers}"]
    for r in trace.records:
        pairs = ",".join(f"({t},{p})" for t, p in zip(r.needed_tokens.tolist(), r.needed_prov.tolist()))
        lines.append(f"{r.step} {r.layer} {int(r.attend)} {_bits_to_hex(r.lookahead)} needed:{pairs}")
    return "\n".join(lines) + "\n"


def write_trace(trace: AccessTrace, path) -> None:
    Path(path).write_text(format_trace(trace))


_HEADER = re.compile(r"#.*layers=(\d+)")
_PAIR = re.compile(r"\((\d+),(\d+)\)")


def parse_trace(text: str, n_layers: int | None = None) -> AccessTrace:
    records = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = _HEADER.match(line)
            if m and n_layers is None:
                n_layers = int(m.group(1))
            continue
        parts = line.split()
        if len(parts) != 5:
            raise TraceParseError(lineno, f"expected 5 fields, got {len(parts)}")
        try:
            step, layer = int(parts[0]), int(parts[1])
        except ValueError:
            raise TraceParseError(lineno, "step and layer must be integers") from None
        if step < 0 or layer < 0:
            raise TraceParseError(lineno, "step and layer must be non-negative")
        if parts[2] not in ("0", "1"):
            raise TraceParseError(lineno, f"attend flag must be 0 or 1, got {parts[2]!r}")
        look = None
        if parts[3] != "-":
            try:
                look = _hex_to_bits(parts[3], step)
            except ValueError as exc:
                raise TraceParseError(lineno, f"bad look-ahead mask: {exc}") from None
        if not parts[4].startswith("needed:"):
            raise TraceParseError(lineno, "fifth field must start with 'needed:'")
        body = parts[4][len("needed:"):]
        pairs = _PAIR.findall(body)
        if body and ",".join(f"({a},{b})" for a, b in pairs) != body:
            raise TraceParseError(lineno, "malformed needed list")
        arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        records.append(TraceRecord(step, layer, parts[2] == "1", look, arr[:, 0].copy(), arr[:, 1].copy()))
    if n_layers is None:
        n_layers = 1 + max((r.layer for r in records), default=-1)
    trace = AccessTrace(n_layers, records)
    validate_trace(trace)
    return trace


def read_trace(path) -> AccessTrace:
    return parse_trace(Path(path).read_text())
