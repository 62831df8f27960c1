"""Command-line harness: seeded, reproducible runs that write CSV reports.

Every run writes its CSVs plus ``<command>.config.txt``, the fully resolved
configuration, into ``--out``. Exit codes: 0 all checks pass, 1 a property
check failed, 2 configuration or input error.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataflow.checks import CHECK_COLUMNS, rel_err, run_dataflow_checks
from .dataflow.precision import Precision
from .dataflow.tiles import TileSpec
from .kvsim.config import KvSimConfig
from .kvsim.simulate import (CELLS, STANDARD_TRACE, calibrate_page_penalty, plan_cells, reports_to_csv,
                             standard_traces)
from .kvsim.storage import kv_storage_accounting
from .kvsim.trace import TraceError, format_trace, read_trace, trace_from_mask, validate_trace
from .numerics.pe import IMPLS
from .numerics.sweep import error_sweep, ordering_failures, sweep_csv
from .runner.config import ConfigError, ResolvedConfig, Workload, parse_config, resolve
from .runner.engine import reference_forward, run_decode, run_prefill
from .runner.model import build_toy_model
from .runner.perf import (VARIANTS, calibrate_nl_cost, decode_csv, decode_gap, decode_speedup_trend,
                          speedup_csv, speedup_grid)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
PREFILL_GRID = (128, 256, 512, 1024)
DECODE_GRID = (512, 1024)


class UsageError(Exception):
    """Bad input detected after argument parsing; maps to exit code 2."""


def write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _table(rows, columns) -> str:
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return out.getvalue()


def _parse_tiles(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"tiles must be comma-separated integers, got {text!r}") from None
    if not sizes or min(sizes) <= 0:
        raise argparse.ArgumentTypeError("tile sizes must be positive")
    return sizes


def load_resolved(args) -> ResolvedConfig:
    raw = parse_config(Path(args.config).read_text()) if args.config else None
    run, model = {}, {}
    if args.seed is not None:
        run["seed"] = model["seed"] = args.seed
    if args.mode is not None:
        run["mode"] = args.mode
    if getattr(args, "tiles", None) is not None:
        run["tiles"] = args.tiles
    if getattr(args, "trials", None) is not None:
        run["trials"] = args.trials
    if getattr(args, "cases", None) is not None:
        run["cases"] = args.cases
    return resolve(raw, run=run, model=model)


class Run:
    """Output directory plus the resolved configuration of one invocation."""

    def __init__(self, command: str, cfg: ResolvedConfig, out: str):
        self.command = command
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.notes: list[str] = []

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        write_atomic(path, text)
        return path

    def note(self, key: str, value) -> None:
        self.notes.append(f"# {key} = {value}")

    def finish(self, failures: list[str]) -> int:
        head = [f"# skipaccel {self.command}"] + self.notes
        self.write(f"{self.command}.config.txt", "\n".join(head) + "\n" + self.cfg.to_text())
        for f in failures:
            print(f"FAIL {f}")
        print(f"{self.command}: {'FAIL' if failures else 'PASS'} -> {self.out}")
        return EXIT_FAIL if failures else EXIT_OK


# ---- subcommands -------------------------------------------------------------

def cmd_pe_validate(args, run: Run) -> int:
    impls = tuple(dict.fromkeys(args.impl or ("IMPL1", "IMPL2")))
    run.note("impls", ",".join(impls))
    rows = error_sweep(impls, trials=run.cfg.run.trials, seed=run.cfg.run.seed)
    run.write("pe_validate.csv", sweep_csv(rows))
    return run.finish(ordering_failures(rows))


def cmd_dataflow_check(args, run: Run) -> int:
    if run.cfg.run.mode != "wide":
        raise UsageError("dataflow-check compares against float64 references; use --mode wide")
    tilings = [TileSpec(t, t, t) for t in run.cfg.run.tiles]
    run.note("inject_fault", int(args.inject_fault))
    results = run_dataflow_checks(tilings, run.cfg.run.cases, run.cfg.run.seed, fault=args.inject_fault)
    run.write("dataflow_check.csv", _table((r.row() for r in results), CHECK_COLUMNS))
    return run.finish([f"{r.check} [{r.tiling}] max_rel_err={r.max_rel_err:.3e}"
                       for r in results if not r.passed])


def _bandwidth(trace, dense, run: Run, calibrate: bool, workers: int):
    cfg = KvSimConfig()
    if calibrate:
        p = calibrate_page_penalty(dense, cfg=cfg)
        cfg = replace(cfg, hbm=replace(cfg.hbm, page_miss_penalty_cycles=p))
        print(f"calibrated page-miss penalty: {p:.4f} cycles")
    run.note("page_miss_penalty_cycles", f"{cfg.hbm.page_miss_penalty_cycles:.6f}")
    reports = [p.report() for p in plan_cells(trace, dense, cfg, workers)]
    return reports


def _bandwidth_failures(reports) -> list[str]:
    by = {(r.policy, r.use_buffer): r for r in reports}
    d, i, t, tb = (by[c] for c in CELLS)
    out = []
    if not d.hbm_utilization_pct > t.hbm_utilization_pct > i.hbm_utilization_pct:
        out.append("utilization ordering dense > token_wise > interleaved_skip violated")
    if not all(tb.aggregate_effective_gbps > r.aggregate_effective_gbps for r in (d, i, t)):
        out.append("buffer-assisted aggregate bandwidth is not the highest")
    return out


def _dense_counterpart(trace):
    mha = np.ones((trace.n_layers, trace.n_tokens), dtype=bool)
    return trace_from_mask(mha, trace.steps)


def cmd_kv_bandwidth(args, run: Run) -> int:
    if args.trace:
        try:
            trace = read_trace(args.trace)
            validate_trace(trace)
        except OSError as exc:
            raise UsageError(f"cannot read trace: {exc}") from None
        dense = _dense_counterpart(trace)
        run.note("trace", args.trace)
    else:
        params = {k: v for k, v in (("n_layers", args.layers), ("prefill_len", args.prefill),
                                    ("decode_len", args.decode), ("stride", args.stride),
                                    ("skip_prob", args.skip_prob)) if v is not None}
        trace, dense = standard_traces(run.cfg.run.seed, **params)
        for k, v in {**STANDARD_TRACE, **params}.items():
            run.note(f"synthetic.{k}", v)
    reports = _bandwidth(trace, dense, run, args.calibrate, args.parallel)
    run.write("kv_bandwidth.csv", reports_to_csv(reports))
    # the ordering is a property of Bernoulli-skip traces; a supplied trace is only reported
    skip = args.skip_prob if args.skip_prob is not None else STANDARD_TRACE["skip_prob"]
    return run.finish([] if args.trace or skip == 0 else _bandwidth_failures(reports))


def cmd_speedup(args, run: Run) -> int:
    perf = run.cfg.perf
    if args.calibrate:
        c = calibrate_nl_cost(perf, skip_prob=run.cfg.model.skip_prob)
        perf = replace(perf, nl_cycles_per_element=c)
        print(f"calibrated nonlinear cost: {c:.6f} cycles/element")
    skip = run.cfg.model.skip_prob
    grid = speedup_grid(PREFILL_GRID, VARIANTS, perf, skip)
    run.write("speedup.csv", speedup_csv(grid))
    wls = [Workload(run.cfg.workload.prefill_len, n) for n in DECODE_GRID]
    trend = decode_speedup_trend(wls, VARIANTS, perf, skip, contention=not args.no_contention)
    run.write("decode_trend.csv", decode_csv(trend))
    failures = []
    for n in PREFILL_GRID:
        cyc = [e.cycles for e in grid if e.prefill_len == n]
        if any(b > a for a, b in zip(cyc, cyc[1:])):
            failures.append(f"prefill {n}: variant cycles not monotone")
    for n in DECODE_GRID:
        sp = [e.speedup for e in trend if e.decode_len == n]
        if not (sp[0] < sp[1] <= sp[2] <= sp[3]):
            failures.append(f"decode {n}: speedup ordering violated")
    g = [decode_gap(trend, n) for n in DECODE_GRID]
    run.note("decode_gap_cycles", ",".join(f"{x:.1f}" for x in g))
    if not args.no_contention and not g[1] < g[0]:
        failures.append("decode gap between PartialSkip and KVReuse does not narrow")
    return run.finish(failures)


DRIFT_COLUMNS = ("quantity", "layer", "value")
STORAGE_COLUMNS = ("stored_entries", "dense_entries", "entry_bytes", "stored_bytes", "dense_bytes",
                   "reduction_pct")


def cmd_e2e(args, run: Run) -> int:
    cfg = run.cfg
    model = build_toy_model(cfg.model)
    tiles = TileSpec(*(cfg.run.tiles[0],) * 3)
    prec = Precision(cfg.run.mode)
    rng = np.random.default_rng([cfg.run.seed, 7])
    prompt = rng.integers(0, cfg.model.vocab, cfg.run.prefill_len)
    pre = run_prefill(model, prompt, prec, tiles)
    dec = run_decode(model, pre.state, cfg.run.decode_len, prec, tiles)
    tokens = pre.state.tokens
    failures = []
    trace = dec.trace if cfg.run.decode_len else pre.trace
    try:
        validate_trace(trace)
    except TraceError as exc:
        failures.append(f"trace inconsistent with mask: {exc}")
    run.write("trace.txt", format_trace(trace))
    reports = _bandwidth(trace, _dense_counterpart(trace), run, False, args.parallel)
    run.write("kv_bandwidth.csv", reports_to_csv(reports))
    st = kv_storage_accounting(dec.mask)
    run.write("storage.csv", _table([{
        "stored_entries": st.stored_entries, "dense_entries": st.dense_entries, "entry_bytes": st.entry_bytes,
        "stored_bytes": st.stored_bytes, "dense_bytes": st.dense_bytes,
        "reduction_pct": f"{st.reduction_pct:.4f}"}], STORAGE_COLUMNS))
    # numeric drift: fused path vs unfused reference on the same token sequence
    ref = reference_forward(model, tokens)
    wide = run_prefill(model, tokens, Precision("wide"), tiles)
    dev = run_prefill(model, tokens, Precision("device"), tiles)
    drift = [{"quantity": "fused_vs_reference_logits", "layer": "-",
              "value": f"{rel_err(wide.logits, ref.logits):.3e}"},
             {"quantity": "routing_agreement_device", "layer": "-",
              "value": f"{np.mean(dev.mask.decisions == wide.mask.decisions):.6f}"},
             {"quantity": "device_vs_wide_logits", "layer": "-",
              "value": f"{rel_err(dev.logits, wide.logits):.3e}"}]
    for l in range(wide.hidden.shape[0]):
        drift.append({"quantity": "device_vs_wide_hidden", "layer": l,
                      "value": f"{rel_err(dev.hidden[l], wide.hidden[l]):.3e}"})
    run.write("drift.csv", _table(drift, DRIFT_COLUMNS))
    run.write("tokens.txt", " ".join(str(t) for t in tokens) + "\n")
    if rel_err(wide.logits, ref.logits) > 1e-9:
        failures.append("fused pipeline differs from the unfused reference beyond 1e-9")
    return run.finish(failures)


COMMANDS = {"pe-validate": cmd_pe_validate, "dataflow-check": cmd_dataflow_check,
            "kv-bandwidth": cmd_kv_bandwidth, "speedup": cmd_speedup, "e2e": cmd_e2e}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="overrides run.seed and model.seed")
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--mode", choices=("wide", "device"), help="numeric mode")
    common.add_argument("--parallel", type=int, default=1, metavar="N", help="worker processes for sweep cells")

    p = argparse.ArgumentParser(prog="skipaccel", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("pe-validate", parents=[common], help="PE column error sweep")
    s.add_argument("--impl", action="append", choices=IMPLS, help="repeatable; default IMPL1 and IMPL2")
    s.add_argument("--trials", type=int)
    s = sub.add_parser("dataflow-check", parents=[common], help="fused vs reference dataflow checks")
    s.add_argument("--tiles", type=_parse_tiles, help="comma-separated square tile sizes, e.g. 4,8,16")
    s.add_argument("--cases", type=int)
    s.add_argument("--inject-fault", action="store_true", help="test hook: corrupt one spilled tile")
    s = sub.add_parser("kv-bandwidth", parents=[common], help="KV bandwidth per mapping/buffer cell")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--trace", help="trace file in the kvsim text grammar")
    src.add_argument("--synthetic", action="store_true", help="Bernoulli-skip trace (default)")
    s.add_argument("--calibrate", action="store_true", help="fit the page-miss penalty to the dense cell")
    s.add_argument("--layers", type=int)
    s.add_argument("--prefill", type=int)
    s.add_argument("--decode", type=int)
    s.add_argument("--stride", type=int)
    s.add_argument("--skip-prob", type=float)
    s = sub.add_parser("speedup", parents=[common], help="analytic MHA speedup grid and decode trend")
    s.add_argument("--calibrate", action="store_true", help="refit the nonlinear cost before the grid")
    s.add_argument("--no-contention", action="store_true", help="read KV at dense bandwidth for all variants")
    s = sub.add_parser("e2e", parents=[common], help="toy model end to end")
    s.add_argument("--tiles", type=_parse_tiles)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.parallel < 1:
            raise UsageError("--parallel must be at least 1")
        run = Run(args.command, load_resolved(args), args.out)
        return COMMANDS[args.command](args, run)
    except (ConfigError, TraceError, UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
