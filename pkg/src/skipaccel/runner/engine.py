"""Toy SkipGPT-style inference: fused prefill/decode plus unfused references.

Each layer runs an MHA submodule and an FFN submodule, each behind its own
router. A token that skips a submodule keeps its residual unchanged. Skipping
MHA also means no new KV entry: later tokens read the entry of the most
recent layer where the token did run MHA.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from ..dataflow.attention import fused_attention, reference_attention
from ..dataflow.npe import rope_apply, split_gate_up, swiglu
from ..dataflow.precision import Precision
from ..dataflow.router import fused_router_submodule, reference_router_submodule
from ..dataflow.routing import FFN, MHA, GumbelConfig, RouteMask, kv_fallback_resolve
from ..dataflow.tiles import TileSpec
from ..kvsim.trace import AccessTrace, trace_from_mask

if TYPE_CHECKING:
    from .model import ToyModel


@dataclass
class InferenceState:
    """Everything decode needs: per-token routing history and the KV store."""
    n_layers: int
    tokens: list[int] = field(default_factory=list)
    decisions: list[np.ndarray] = field(default_factory=list)
    kv_store: dict = field(default_factory=dict)
    next_token: int | None = None

    @property
    def length(self) -> int:
        return len(self.tokens)

    def mask(self) -> RouteMask:
        if not self.decisions:
            return RouteMask(np.zeros((self.n_layers, 2, 0), dtype=bool))
        return RouteMask(np.stack(self.decisions, axis=-1))


@dataclass
class RunResult:
    logits: np.ndarray
    hidden: np.ndarray
    mask: RouteMask
    trace: AccessTrace
    kv_store: dict
    state: InferenceState


def _noise(seed: int, layer: int, sub: int, positions) -> np.ndarray:
    return np.stack([np.random.default_rng([seed, layer, sub, int(p)]).gumbel(size=2)
                     for p in positions]) if len(positions) else np.zeros((0, 2))


def _heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2)


def _forward(model: ToyModel, state: InferenceState, new_tokens, prec: Precision, tiles: TileSpec,
             fused: bool, routing: bool = True, calibrate=None):
    """Run ``new_tokens`` through every layer, extending ``state``.

    ``calibrate(router, x)`` is called just before each router sees its
    input, letting a caller fit router parameters on live activations.
    """
    cfg = model.cfg
    H, dh = cfg.n_heads, cfg.d_head
    start = state.length
    n = len(new_tokens)
    pos = np.arange(start, start + n)
    T = start + n
    x = model.embed[np.asarray(new_tokens, dtype=np.int64)].astype(np.float64)
    gcfg = GumbelConfig(cfg.routing, cfg.seed)
    dec = np.zeros((cfg.n_layers, 2, n), dtype=bool)
    old = np.stack(state.decisions, axis=-1) if state.decisions else np.zeros((cfg.n_layers, 2, 0), bool)
    hidden = [x.copy()]
    for l, lw in enumerate(model.layers):
        force = l == 0 or cfg.skip_prob == 0 or not routing
        noise = _noise(cfg.seed, l, MHA, pos) if cfg.routing == "sampled" else None
        if calibrate is not None:
            calibrate(lw.router_attn, x)
        ex, qkv = _submodule(x, lw.router_attn, lw.gamma_attn, lw.w_qkv, tiles, gcfg, prec, noise,
                             force, fused, cfg.rms_only)
        dec[l, MHA] = ex
        idx = np.flatnonzero(ex)
        if len(idx):
            q, k, v = np.split(qkv, 3, axis=1)
            q = rope_apply(q.reshape(-1, dh), np.repeat(pos[idx], H), model.rope).reshape(len(idx), -1)
            k = rope_apply(k.reshape(-1, dh), np.repeat(pos[idx], H), model.rope).reshape(len(idx), -1)
            for r, i in enumerate(idx):
                state.kv_store[(l, int(pos[i]))] = (k[r].copy(), v[r].copy())
            full = np.concatenate([old[:, MHA, :], dec[:, MHA, :]], axis=1)
            mask = RouteMask.from_arrays(full[:l + 1], force_layer0=False)
            kv = [kv_fallback_resolve(l, j, mask, state.kv_store) for j in range(T)]
            kk = _heads(np.stack([a for a, _ in kv]), H)
            vv = _heads(np.stack([b for _, b in kv]), H)
            qq = _heads(q, H)
            if fused:
                o = fused_attention(qq, kk, vv, tiles, prec=prec, q_pos=pos[idx])
            else:
                o = reference_attention(qq, kk, vv, q_pos=pos[idx])
            o = o.transpose(1, 0, 2).reshape(len(idx), -1)
            x[idx] = x[idx] + prec.matmul(o, lw.w_o)
        noise = _noise(cfg.seed, l, FFN, pos) if cfg.routing == "sampled" else None
        if calibrate is not None:
            calibrate(lw.router_ffn, x)
        ex, h = _submodule(x, lw.router_ffn, lw.gamma_ffn, lw.w_gate_up, tiles, gcfg, prec, noise,
                           force, fused, cfg.rms_only)
        dec[l, FFN] = ex
        idx = np.flatnonzero(ex)
        if len(idx):
            gate, up = split_gate_up(h, model.gate_up_tile)
            act = swiglu(gate, up, prec.dtype).astype(np.float64)
            x[idx] = x[idx] + prec.matmul(act, lw.w_down)
        hidden.append(x.copy())
    xn = x / np.sqrt((x * x).mean(axis=1, keepdims=True) + 1e-5) * model.gamma_final
    logits = xn @ model.embed.T
    state.tokens.extend(int(t) for t in new_tokens)
    state.decisions.extend(dec[:, :, i] for i in range(n))
    state.next_token = int(np.argmax(logits[-1])) if n else state.next_token
    return logits, np.stack(hidden)


def _submodule(x, router, gamma, w, tiles, gcfg, prec, noise, force, fused, rms_only):
    if fused:
        return fused_router_submodule(x, router, gamma, w, tiles, gcfg, prec, noise=noise,
                                      rms_only=rms_only, force_execute=force)
    return reference_router_submodule(x, router, gamma, w, gcfg, noise=noise, rms_only=rms_only,
                                      force_execute=force)


def _result(state: InferenceState, logits, hidden, positions) -> RunResult:
    mask = state.mask()
    return RunResult(logits, hidden, mask, trace_from_mask(mask, positions), state.kv_store, state)


def run_prefill(model: ToyModel, tokens, prec: Precision = Precision(), tiles: TileSpec = TileSpec(),
                fused: bool = True, routing: bool = True) -> RunResult:
    """Process a prompt in one pass. The trace covers positions 1..n-1."""
    state = InferenceState(model.cfg.n_layers)
    logits, hidden = _forward(model, state, list(tokens), prec, tiles, fused, routing)
    return _result(state, logits, hidden, range(1, state.length))


def run_decode(model: ToyModel, state: InferenceState, n_steps: int, prec: Precision = Precision(),
               tiles: TileSpec = TileSpec(), fused: bool = True) -> RunResult:
    """Greedy generation of ``n_steps`` tokens continuing ``state``."""
    if state.next_token is None:
        raise ValueError("decode needs a state produced by prefill")
    first = state.length
    logits, hidden = [], []
    for _ in range(n_steps):
        lg, hd = _forward(model, state, [state.next_token], prec, tiles, fused)
        logits.append(lg)
        hidden.append(hd)
    lg = np.concatenate(logits) if logits else np.zeros((0, model.cfg.vocab))
    hd = np.concatenate(hidden, axis=1) if hidden else np.zeros((model.cfg.n_layers + 1, 0, model.cfg.d_model))
    return _result(state, lg, hd, range(first, state.length))


def reference_forward(model: ToyModel, tokens, routing: bool = True) -> RunResult:
    """Unfused pipeline over the whole sequence; ``routing=False`` is the dense model."""
    state = InferenceState(model.cfg.n_layers)
    logits, hidden = _forward(model, state, list(tokens), Precision(), TileSpec(), False, routing)
    return _result(state, logits, hidden, range(1, state.length))


def calibrate_routers(model: ToyModel, tokens, fit) -> None:
    """Refit every router bias on the activations that actually reach it.

    Layers are visited in order, so layer l sees hidden states produced by the
    already calibrated layers below it. ``fit(w_theta, x)`` returns a bias.
    """
    def hook(router, x):
        router.bias = fit(router.w_theta, x)

    _forward(model, InferenceState(model.cfg.n_layers), list(tokens), Precision(), TileSpec(), False,
             calibrate=hook)
