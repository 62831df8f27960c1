"""Randomized fused-vs-reference and invariance checks for the dataflows."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (SoftmaxFeatures, fused_attention, online_softmax_update,
                        reference_attention)
from .router import fused_router_submodule, reference_router_submodule
from .routing import GumbelConfig, RouterParams
from .tiles import OffChipStore, TileSpec

CHECK_COLUMNS = ("check", "tiling", "cases", "max_rel_err", "tol", "passed")
EQUIV_TOL = 1e-9
INVARIANCE_TOL = 1e-12


@dataclass(frozen=True)
class CheckResult:
    check: str
    tiling: str
    cases: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.tol)

    def row(self) -> dict:
        return {"check": self.check, "tiling": self.tiling, "cases": self.cases,
                "max_rel_err": f"{self.max_rel_err:.3e}", "tol": f"{self.tol:.0e}",
                "passed": int(self.passed)}


class FaultyStore(OffChipStore):
    """Test hook: perturbs the first spilled tile so checks must fail."""

    def write(self, key, tile: np.ndarray) -> None:
        first = not self.writes
        super().write(key, tile)
        if first:
            self.data[key].flat[0] += 1.0


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        return np.inf
    if not a.size:
        return 0.0
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def tiling_label(t: TileSpec) -> str:
    return f"{t.b_r}x{t.b_c}x{t.s}"


def random_router_case(rng: np.random.Generator, max_rows: int = 64, max_d: int = 128):
    n = int(rng.integers(1, max_rows + 1))
    d = int(rng.integers(2, max_d + 1))
    m = int(rng.integers(1, 17))
    x = rng.normal(size=(n, d)) * rng.uniform(0.5, 4.0) + rng.normal(size=(1, d))
    router = RouterParams(rng.normal(size=(d, 2)) / np.sqrt(d), rng.normal(size=2) * 0.5)
    return x, router, 1.0 + 0.1 * rng.normal(size=d), rng.normal(size=(d, m)) / np.sqrt(d)


def random_attention_case(rng: np.random.Generator, max_rows: int = 64, max_d: int = 32):
    h = int(rng.integers(1, 5))
    lk = int(rng.integers(1, max_rows + 1))
    lq = int(rng.integers(1, lk + 1))
    d = int(rng.integers(1, max_d + 1))
    q, k, v = (rng.normal(size=(h, n, d)) * 2.0 for n in (lq, lk, lk))
    return q, k, v, bool(rng.integers(0, 2))


def router_equivalence(tiles: TileSpec, cases: int, seed: int) -> CheckResult:
    rng = np.random.default_rng([seed, 1])
    worst = 0.0
    for _ in range(cases):
        x, router, gamma, w = random_router_case(rng)
        cfg = GumbelConfig("sampled" if rng.integers(0, 2) else "deterministic_argmax")
        noise = rng.gumbel(size=(len(x), 2))
        m1, y1 = fused_router_submodule(x, router, gamma, w, tiles, cfg, noise=noise)
        m2, y2 = reference_router_submodule(x, router, gamma, w, cfg, noise=noise)
        worst = max(worst, np.inf if not np.array_equal(m1, m2) else rel_err(y1, y2))
    return CheckResult("router_fused_vs_reference", tiling_label(tiles), cases, worst, EQUIV_TOL)


def attention_equivalence(tiles: TileSpec, cases: int, seed: int, fault: bool = False) -> CheckResult:
    rng = np.random.default_rng([seed, 2])
    worst = 0.0
    for _ in range(cases):
        q, k, v, causal = random_attention_case(rng)
        store = FaultyStore() if fault else OffChipStore()
        out = fused_attention(q, k, v, tiles, causal=causal, store=store)
        worst = max(worst, rel_err(out, reference_attention(q, k, v, causal=causal)))
        if not store.balanced():
            worst = np.inf
    return CheckResult("attention_fused_vs_reference", tiling_label(tiles), cases, worst, EQUIV_TOL)


def tiling_invariance(tilings, cases: int, seed: int) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 3])
    label = "|".join(tiling_label(t) for t in tilings)
    w_att = w_rt = 0.0
    for _ in range(cases):
        q, k, v, causal = random_attention_case(rng)
        outs = [fused_attention(q, k, v, t, causal=causal) for t in tilings]
        w_att = max([w_att] + [rel_err(o, outs[0]) for o in outs[1:]])
        x, router, gamma, w = random_router_case(rng)
        ys = [fused_router_submodule(x, router, gamma, w, t) for t in tilings]
        for m, y in ys[1:]:
            same = np.array_equal(m, ys[0][0])
            w_rt = max(w_rt, rel_err(y, ys[0][1]) if same else np.inf)
    return [CheckResult("attention_tiling_invariance", label, cases, w_att, INVARIANCE_TOL),
            CheckResult("router_tiling_invariance", label, cases, w_rt, INVARIANCE_TOL)]


def softmax_partition_invariance(cases: int, seed: int) -> CheckResult:
    """Features from a random column partition equal the one-shot features."""
    rng = np.random.default_rng([seed, 4])
    worst = 0.0
    for _ in range(cases):
        rows, cols = int(rng.integers(1, 9)), int(rng.integers(1, 65))
        s = rng.normal(size=(rows, cols)) * rng.uniform(0.1, 30.0)
        whole = online_softmax_update(SoftmaxFeatures.empty(rows), s)
        cuts = np.sort(rng.choice(np.arange(1, cols), size=min(cols - 1, int(rng.integers(0, 6))),
                                  replace=False)) if cols > 1 else []
        f = SoftmaxFeatures.empty(rows)
        for part in np.split(s, cuts, axis=1):
            f = online_softmax_update(f, part)
        worst = max(worst, rel_err(f.m, whole.m), rel_err(f.ell, whole.ell))
    return CheckResult("softmax_partition_invariance", "-", cases, worst, INVARIANCE_TOL)


def permutation_invariance(tiles: TileSpec, cases: int, seed: int) -> CheckResult:
    """Non-causal attention output is unchanged by permuting the KV rows."""
    rng = np.random.default_rng([seed, 5])
    worst = 0.0
    for _ in range(cases):
        q, k, v, _ = random_attention_case(rng)
        perm = rng.permutation(k.shape[1])
        a = fused_attention(q, k, v, tiles)
        b = fused_attention(q, k[:, perm], v[:, perm], tiles)
        worst = max(worst, rel_err(b, a))
    return CheckResult("attention_permutation_invariance", tiling_label(tiles), cases, worst,
                       INVARIANCE_TOL)


def run_dataflow_checks(tilings, cases: int = 100, seed: int = 0, fault: bool = False) -> list[CheckResult]:
    tilings = list(tilings)
    out = []
    for t in tilings:
        out.append(router_equivalence(t, cases, seed))
        out.append(attention_equivalence(t, cases, seed, fault))
    out.extend(tiling_invariance(tilings, cases, seed))
    out.append(softmax_partition_invariance(cases, seed))
    out.append(permutation_invariance(tilings[0], cases, seed))
    return out
