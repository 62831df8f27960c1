"""Seeded toy decoder model standing in for real weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dataflow.npe import interleave_gate_up, rope_table
from ..dataflow.routing import EXECUTE, SKIP, RouterParams
from ..numerics.quant import QuantizedWeight, quantize_int4
from .config import ModelConfig
from .engine import calibrate_routers

GATE_UP_TILE = 8
CALIB_TOKENS = 4096
# length of the random prompt used to refit routers on live hidden states
CALIB_SEQ = 512


@dataclass
class LayerWeights:
    gamma_attn: np.ndarray
    w_qkv: np.ndarray | QuantizedWeight
    w_o: np.ndarray | QuantizedWeight
    router_attn: RouterParams
    gamma_ffn: np.ndarray
    w_gate_up: np.ndarray | QuantizedWeight
    w_down: np.ndarray | QuantizedWeight
    router_ffn: RouterParams


@dataclass
class ToyModel:
    cfg: ModelConfig
    embed: np.ndarray
    layers: list[LayerWeights]
    gamma_final: np.ndarray
    rope: tuple[np.ndarray, np.ndarray]
    gate_up_tile: int


def calibrate_router_bias(w_theta: np.ndarray, activations: np.ndarray, skip_prob: float,
                          mode: str = "deterministic_argmax", iters: int = 60) -> np.ndarray:
    """Bias (skip, execute) giving the target skip rate on ``activations``.

    A token skips when z_exec + b < z_skip. Under sampled routing the skip
    probability of a token is sigmoid(-(margin + b)) instead, and the mean of
    that is matched. Either rate falls as b rises, so b is found by bisection.
    """
    z = activations @ w_theta
    margin = z[:, EXECUTE] - z[:, SKIP]
    if mode == "sampled":
        rate = lambda b: np.mean(0.5 * (1.0 - np.tanh(0.5 * (margin + b))))
        span = np.abs(margin).max() + 50.0
    else:
        rate = lambda b: np.mean(margin + b < 0)
        span = np.abs(margin).max() + 1.0
    lo, hi = -span, span
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if rate(mid) > skip_prob:
            lo = mid
        else:
            hi = mid
    b = np.zeros(2)
    b[EXECUTE] = 0.5 * (lo + hi)
    return b


def _dense(rng, d_in, d_out):
    return rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))


def build_toy_model(cfg: ModelConfig) -> ToyModel:
    """Random weights from ``cfg.seed``; routers calibrated to ``cfg.skip_prob``.

    Router biases start from a bisection on N(0, 1) activations. The residual
    stream grows with depth, so each router is then refit, layer by layer, on
    the hidden states of a seeded random prompt. In int4 mode projection
    weights are quantized per output column.
    """
    rng = np.random.default_rng(cfg.seed)
    d, f = cfg.d_model, cfg.d_ff
    calib = np.random.default_rng([cfg.seed, 1]).normal(size=(CALIB_TOKENS, d))
    q = quantize_int4 if cfg.weight_mode == "int4_symmetric" else (lambda w: w)
    tile = GATE_UP_TILE if f % GATE_UP_TILE == 0 else f
    layers = []
    for _ in range(cfg.n_layers):
        wq, wk, wv = (_dense(rng, d, d) for _ in range(3))
        w_o = _dense(rng, d, d)
        w_gate, w_up = _dense(rng, d, f), _dense(rng, d, f)
        w_down = _dense(rng, f, d)
        routers = []
        for _ in range(2):
            w_theta = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, 2))
            routers.append(RouterParams(w_theta, calibrate_router_bias(w_theta, calib, cfg.skip_prob, cfg.routing)))
        layers.append(LayerWeights(
            gamma_attn=1.0 + 0.1 * rng.normal(size=d), w_qkv=q(np.concatenate([wq, wk, wv], axis=1)),
            w_o=q(w_o), router_attn=routers[0], gamma_ffn=1.0 + 0.1 * rng.normal(size=d),
            w_gate_up=q(interleave_gate_up(w_gate, w_up, tile)),
            w_down=q(w_down), router_ffn=routers[1]))
    embed = rng.normal(size=(cfg.vocab, d))
    model = ToyModel(cfg, embed, layers, 1.0 + 0.1 * rng.normal(size=d), rope_table(4096, cfg.d_head), tile)
    if cfg.skip_prob > 0:
        prompt = np.random.default_rng([cfg.seed, 2]).integers(0, cfg.vocab, CALIB_SEQ)
        calibrate_routers(model, prompt, lambda w, x: calibrate_router_bias(w, x, cfg.skip_prob, cfg.routing))
    return model
