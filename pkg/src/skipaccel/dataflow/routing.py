"""Routing decisions: Gumbel-max routing, route masks and KV provenance."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MHA, FFN = 0, 1
EXECUTE, SKIP = 1, 0


class RoutingError(ValueError):
    pass


class ProvenanceError(RuntimeError):
    """A KV lookup found no executed layer to fall back to."""


@dataclass(frozen=True)
class GumbelConfig:
    mode: str = "deterministic_argmax"
    seed: int = 0
    tie_break: str = "prefer_execute"

    def __post_init__(self):
        if self.mode not in ("deterministic_argmax", "sampled"):
            raise ValueError(f"unknown routing mode {self.mode!r}")
        if self.tie_break != "prefer_execute":
            raise ValueError("only the prefer_execute tie rule is supported")


@dataclass
class RouterParams:
    """Two-way router head. Column 1 of ``w_theta`` is the execute logit."""
    w_theta: np.ndarray
    bias: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.w_theta = np.asarray(self.w_theta, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.w_theta.ndim != 2 or self.w_theta.shape[1] != 2:
            raise ValueError(f"w_theta must be D x 2, got {self.w_theta.shape}")


def gumbel_route(logits, cfg: GumbelConfig = GumbelConfig(), rng: np.random.Generator | None = None,
                 noise: np.ndarray | None = None) -> np.ndarray:
    """Per-token execute (True) / skip (False) decisions from n x 2 logits.

    Sampled mode adds standard Gumbel noise to the raw logits; argmax over
    perturbed logits is an exact draw from softmax(logits). Pass ``noise`` to
    supply pre-drawn perturbations, otherwise they come from ``rng`` (or a
    generator seeded from ``cfg.seed``). Deterministic mode never touches the
    stream.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != 2:
        raise RoutingError(f"logits must be n x 2, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise RoutingError("non-finite router logits")
    if cfg.mode == "sampled":
        if noise is None:
            rng = rng if rng is not None else np.random.default_rng(cfg.seed)
            noise = rng.gumbel(size=z.shape)
        z = z + noise
    return z[:, EXECUTE] >= z[:, SKIP]


def provenance_table(mha_exec: np.ndarray) -> np.ndarray:
    """last_executed[l, i]: most recent layer <= l where token i ran MHA.

    Entries are -1 where no execution has happened yet.
    """
    ex = np.asarray(mha_exec, dtype=bool)
    prov = np.full(ex.shape, -1, dtype=np.int64)
    cur = np.full(ex.shape[1:], -1, dtype=np.int64)
    for l in range(ex.shape[0]):
        cur = np.where(ex[l], l, cur)
        prov[l] = cur
    return prov


@dataclass
class RouteMask:
    """Execute/skip decisions indexed (layer, submodule, token)."""
    decisions: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.decisions, dtype=bool)
        if d.ndim != 3 or d.shape[1] != 2:
            raise ValueError(f"decisions must be (layers, 2, tokens), got {d.shape}")
        self.decisions = d
        self._prov = None

    @classmethod
    def from_arrays(cls, mha: np.ndarray, ffn: np.ndarray | None = None,
                    force_layer0: bool = True) -> "RouteMask":
        mha = np.array(mha, dtype=bool)
        ffn = np.ones_like(mha) if ffn is None else np.array(ffn, dtype=bool)
        if force_layer0 and mha.shape[0]:
            mha[0] = True
            ffn[0] = True
        return cls(np.stack([mha, ffn], axis=1))

    @classmethod
    def bernoulli(cls, n_layers: int, n_tokens: int, skip_prob: float,
                  rng: np.random.Generator, independent_ffn: bool = True) -> "RouteMask":
        """Independent per-(layer, token) skips; layer 0 always executes."""
        mha = rng.random((n_layers, n_tokens)) >= skip_prob
        ffn = rng.random((n_layers, n_tokens)) >= skip_prob if independent_ffn else mha.copy()
        return cls.from_arrays(mha, ffn)

    @property
    def n_layers(self) -> int:
        return self.decisions.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.decisions.shape[2]

    @property
    def mha(self) -> np.ndarray:
        return self.decisions[:, MHA, :]

    @property
    def ffn(self) -> np.ndarray:
        return self.decisions[:, FFN, :]

    @property
    def last_executed(self) -> np.ndarray:
        if self._prov is None:
            self._prov = provenance_table(self.mha)
        return self._prov

    def provenance(self, layer: int, token: int) -> int:
        p = int(self.last_executed[layer, token])
        if p < 0:
            raise ProvenanceError(f"token {token} has no executed MHA at or below layer {layer}")
        return p

    def check(self) -> None:
        if self.n_layers and not self.mha[0].all():
            raise ProvenanceError("layer 0 must execute MHA for every token")


def kv_fallback_resolve(layer: int, token: int, mask: RouteMask, kv_store) -> tuple:
    """(k_row, v_row) from the most recent layer where ``token`` ran MHA.

    ``kv_store`` maps (layer, token) -> (k_row, v_row) and is expected to hold
    every executed pair.
    """
    p = mask.provenance(layer, token)
    try:
        return kv_store[(p, token)]
    except KeyError:
        raise ProvenanceError(f"KV for token {token} missing at provenance layer {p}") from None
