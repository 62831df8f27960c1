"""Compiled vs pure-Python backends of the hot kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Times the PE column kernels, the packed-DSP recovery, the round packer and
the round coster on both backends, checks the outputs agree, and prints a
table of best-of-N wall times.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from skipaccel.kvsim import _sched_py, schedule, simulate
from skipaccel.kvsim.simulate import SimulationPlan, standard_traces
from skipaccel.numerics import kernels


def best_of(fn, repeat: int) -> tuple[float, object]:
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return len(a) == len(b) and all(same(x, y) for x, y in zip(a, b))
    return bool(np.allclose(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), rtol=1e-12))


def numerics_cases(rng: np.random.Generator):
    n = 20_000
    x = rng.uniform(-1, 1, (n, 64)).astype(np.float16).view(np.uint16)
    wa = rng.uniform(-1, 1, (n, 64)).astype(np.float16).view(np.uint16)
    wb = rng.uniform(-1, 1, (n, 64)).astype(np.float16).view(np.uint16)
    qa, qb = (rng.integers(-8, 8, (n, 64)).astype(np.int8) for _ in range(2))
    u0, u1, v = (rng.integers(0, 1 << 11, 10 ** 6) for _ in range(3))
    return {
        "dual_products 1e6": lambda m: m.dual_products(u0, u1, v, 11),
        "pe_dot_fp16 IMPL1 2e4x64": lambda m: m.pe_dot_fp16(x, wa, wb, "IMPL1"),
        "pe_dot_fp16 IMPL2 2e4x64": lambda m: m.pe_dot_fp16(x, wa, wb, "IMPL2"),
        "pe_dot_int4 IMPL1 2e4x64": lambda m: m.pe_dot_int4(x, qa, qb, "IMPL1"),
    }


def scheduler_cases(rng: np.random.Generator):
    n = 4096
    pm = (np.uint64(1) << rng.integers(0, 32, n).astype(np.uint64)).astype(np.uint64)
    src = rng.choice(np.array([0, 1, 2], dtype=np.int8), n, p=[0.8, 0.15, 0.05])
    want = rng.integers(0, 2, n).astype(np.int8)
    args = (pm, pm.copy(), src, want, True, 16, 16, 64)
    rnd = np.sort(_sched_py.first_fit(*args)[0])
    g0 = rng.integers(0, 1 << 14, n).astype(np.int64)
    base = rng.integers(0, 32, n).astype(np.int64) * 1 << 12
    cargs = (rnd, src, g0, base, 16, 1, 32, 128, 1.0, 16.0, 8.0)
    return {
        "first_fit 4096 entries": lambda m: m.first_fit(*args),
        "round_costs 4096 entries": lambda m: m.round_costs(*cargs),
    }


def whole_trace(mod):
    """token_wise + buffer plan of the standard trace with ``mod`` as scheduler."""
    saved = schedule._sched, simulate._sched
    schedule._sched = simulate._sched = mod
    try:
        trace, _ = standard_traces(0)
        return SimulationPlan(trace, "token_wise", True).report().total_cycles
    finally:
        schedule._sched, simulate._sched = saved


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    rows = []
    kb = kernels.backends()
    sb = {"python": _sched_py}
    if schedule.BACKEND == "cython":
        sb["compiled"] = schedule._sched
    groups = [(numerics_cases(rng), kb), (scheduler_cases(rng), sb),
              ({"standard trace token_wise+buffer": whole_trace}, sb)]
    for cases, mods in groups:
        for name, fn in cases.items():
            t_py, out_py = best_of(lambda: fn(mods["python"]), args.repeat)
            if "compiled" in mods:
                t_c, out_c = best_of(lambda: fn(mods["compiled"]), args.repeat)
                rows.append((name, t_py, t_c, t_py / t_c, same(out_py, out_c)))
            else:
                rows.append((name, t_py, float("nan"), float("nan"), True))
    print(f"{'kernel':36s} {'python s':>10s} {'compiled s':>11s} {'speedup':>8s}  agree")
    for name, t_py, t_c, sp, ok in rows:
        print(f"{name:36s} {t_py:10.4f} {t_c:11.4f} {sp:8.1f}  {'yes' if ok else 'NO'}")


if __name__ == "__main__":
    main()
