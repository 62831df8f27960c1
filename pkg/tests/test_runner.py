"""Toy model, inference engine, config format and the analytic performance model."""
import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skipaccel.dataflow import DEVICE, MHA, FFN, Precision, TileSpec
from skipaccel.dataflow.checks import rel_err
from skipaccel.kvsim import kv_storage_accounting
from skipaccel.numerics import QuantizedWeight
from skipaccel.runner import (CALIBRATED_NL_CYCLES, VARIANTS, ConfigError, ModelConfig, PerfParams,
                              RunSettings, Workload, build_toy_model, calibrate_nl_cost,
                              calibrate_router_bias, decode_gap, decode_speedup_trend,
                              mha_speedup_model, mha_stages, parse_config, reference_forward,
                              resolve, run_decode, run_prefill, speedup_grid)
from skipaccel.runner.perf import HEAD_EFFICIENCY, decode_csv, speedup_csv

UTIL = {"dense_interleaved": 88.7, "interleaved_skip": 53.9, "token_wise": 78.0,
        "token_wise_buffer": 103.9}


@pytest.fixture(scope="module")
def model():
    return build_toy_model(ModelConfig(seed=3))


def prompt(n, seed=0, vocab=64):
    return np.random.default_rng(seed).integers(0, vocab, n).tolist()


class TestModelBuild:
    def test_same_seed_same_weights(self):
        a, b = build_toy_model(ModelConfig(seed=1)), build_toy_model(ModelConfig(seed=1))
        np.testing.assert_array_equal(a.embed, b.embed)
        for la, lb in zip(a.layers, b.layers):
            np.testing.assert_array_equal(la.w_qkv, lb.w_qkv)
            np.testing.assert_array_equal(la.router_attn.bias, lb.router_attn.bias)

    def test_seed_changes_weights(self):
        a, b = build_toy_model(ModelConfig(seed=1)), build_toy_model(ModelConfig(seed=2))
        assert not np.array_equal(a.embed, b.embed)

    def test_int4_mode_quantizes_projections(self):
        m = build_toy_model(ModelConfig(weight_mode="int4_symmetric"))
        lw = m.layers[0]
        for w in (lw.w_qkv, lw.w_o, lw.w_gate_up, lw.w_down):
            assert isinstance(w, QuantizedWeight)
            assert w.q.min() >= -8 and w.q.max() <= 7

    @pytest.mark.parametrize("bad", [dict(d_model=30), dict(d_head=7, n_heads=4, d_model=28),
                                     dict(skip_prob=1.0), dict(weight_mode="int8"),
                                     dict(routing="topk")])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)


class TestRouterCalibration:
    @pytest.mark.parametrize("p", [0.1, 0.25, 0.5])
    def test_deterministic_rate_on_fresh_gaussian(self, p):
        rng = np.random.default_rng(0)
        d = 32
        w = rng.normal(0, 1 / np.sqrt(d), (d, 2))
        b = calibrate_router_bias(w, rng.normal(size=(4096, d)), p)
        x = rng.normal(size=(10_000, d))
        z = x @ w + b
        assert abs(np.mean(z[:, 1] < z[:, 0]) - p) <= 0.02

    def test_sampled_rate(self):
        rng = np.random.default_rng(1)
        d = 32
        w = rng.normal(0, 1 / np.sqrt(d), (d, 2))
        b = calibrate_router_bias(w, rng.normal(size=(4096, d)), 0.25, mode="sampled")
        z = rng.normal(size=(50_000, d)) @ w + b + rng.gumbel(size=(50_000, 2))
        assert abs(np.mean(z[:, 1] < z[:, 0]) - 0.25) <= 0.02

    def test_model_skip_rate_near_target(self):
        m = build_toy_model(ModelConfig(n_layers=8, seed=0))
        r = reference_forward(m, prompt(256, seed=9))
        mha = r.mask.mha[1:]
        assert abs(1 - mha.mean() - 0.25) < 0.05


class TestEngine:
    def test_fused_matches_reference(self, model):
        toks = prompt(20)
        a = run_prefill(model, toks, tiles=TileSpec(4, 4, 8))
        b = run_prefill(model, toks, fused=False)
        np.testing.assert_array_equal(a.mask.decisions, b.mask.decisions)
        assert rel_err(a.logits, b.logits) <= 1e-9

    @pytest.mark.parametrize("tiles", [TileSpec(1, 1, 1), TileSpec(3, 5, 7), TileSpec(64, 64, 64)])
    def test_tiling_does_not_change_output(self, model, tiles):
        toks = prompt(12, seed=1)
        a = run_prefill(model, toks, tiles=tiles)
        b = run_prefill(model, toks, tiles=TileSpec(4, 4, 8))
        np.testing.assert_array_equal(a.mask.decisions, b.mask.decisions)
        assert rel_err(a.logits, b.logits) <= 1e-12

    def test_zero_skip_equals_dense(self):
        m = build_toy_model(ModelConfig(skip_prob=0.0, seed=4))
        toks = prompt(16, seed=2)
        a = run_prefill(m, toks)
        b = reference_forward(m, toks, routing=False)
        assert a.mask.decisions.all()
        assert rel_err(a.logits, b.logits) <= 1e-9

    def test_skipped_tokens_keep_residual(self, model):
        r = run_prefill(model, prompt(24, seed=3))
        both = ~r.mask.mha & ~r.mask.ffn
        assert both.any()
        for l, t in zip(*np.nonzero(both)):
            np.testing.assert_array_equal(r.hidden[l + 1, t], r.hidden[l, t])

    def test_skipped_mha_writes_no_kv(self, model):
        r = run_prefill(model, prompt(24, seed=3))
        stored = {k for k in r.kv_store}
        want = {(int(l), int(t)) for l, t in zip(*np.nonzero(r.mask.mha))}
        assert stored == want

    def test_decode_continues_prefill(self, model):
        toks = prompt(10, seed=5)
        pre = run_prefill(model, toks)
        dec = run_decode(model, pre.state, 5)
        full = reference_forward(model, pre.state.tokens)
        np.testing.assert_array_equal(full.mask.decisions, dec.mask.decisions)
        assert rel_err(dec.logits, full.logits[-5:]) <= 1e-9

    def test_decode_deterministic(self, model):
        runs = []
        for _ in range(2):
            pre = run_prefill(model, prompt(8, seed=6))
            runs.append(run_decode(model, pre.state, 4).state.tokens)
        assert runs[0] == runs[1]

    def test_decode_needs_prefill(self, model):
        from skipaccel.runner import InferenceState
        with pytest.raises(ValueError):
            run_decode(model, InferenceState(model.cfg.n_layers), 1)

    def test_trace_matches_mask(self, model):
        r = run_prefill(model, prompt(16, seed=7))
        np.testing.assert_array_equal(r.trace.mha_mask(), r.mask.mha)

    def test_sampled_routing_reproducible(self):
        m = build_toy_model(ModelConfig(routing="sampled", seed=5))
        toks = prompt(16, seed=8)
        a, b = run_prefill(m, toks), run_prefill(m, toks, fused=False)
        np.testing.assert_array_equal(a.mask.decisions, b.mask.decisions)
        assert rel_err(a.logits, b.logits) <= 1e-9

    def test_device_mode_drift_is_small(self, model):
        toks = prompt(12, seed=9)
        wide = run_prefill(model, toks)
        dev = run_prefill(model, toks, prec=Precision("device"))
        assert 0 < rel_err(dev.logits, wide.logits) < 0.1

    def test_int4_model_runs_on_device(self):
        m = build_toy_model(ModelConfig(weight_mode="int4_symmetric", seed=1))
        toks = prompt(8, seed=10)
        wide = run_prefill(m, toks)
        dev = run_prefill(m, toks, prec=DEVICE)
        assert np.isfinite(dev.logits).all() and rel_err(dev.logits, wide.logits) < 0.2

    def test_storage_reduction_vicinity(self):
        m = build_toy_model(ModelConfig(n_layers=8, seed=0))
        r = run_prefill(m, prompt(256, seed=11))
        red = kv_storage_accounting(r.mask).reduction_pct
        assert abs(red - 25 * 7 / 8) < 3.0

    def test_layer0_always_executes(self, model):
        r = run_prefill(model, prompt(20, seed=12))
        assert r.mask.mha[0].all() and r.mask.ffn[0].all()
        assert MHA == 0 and FFN == 1


class TestConfigText:
    def test_round_trip(self):
        cfg = resolve(model={"seed": 7, "skip_prob": 0.3}, run={"tiles": (2, 4)})
        back = resolve(parse_config(cfg.to_text()))
        assert back == cfg

    @pytest.mark.parametrize("text, line", [
        ("model.seed = 1\nbogus\n", 2),
        ("\nmodel.nope = 1\n", 2),
        ("foo.seed = 1\n", 1),
        ("seed = 1\n", 1),
        ("model.seed = 1\nmodel.seed = 2\n", 2),
        ("model.seed =\n", 1),
    ])
    def test_errors_carry_line_numbers(self, text, line):
        with pytest.raises(ConfigError) as exc:
            parse_config(text)
        assert exc.value.lineno == line

    def test_comments_and_literals(self):
        raw = parse_config("# c\nrun.tiles = 4, 8  # sizes\nmodel.rms_only = true\nperf.nl_cycles_per_element = none\n")
        assert raw["run"]["tiles"] == (4, 8) and raw["model"]["rms_only"] is True
        assert raw["perf"]["nl_cycles_per_element"] is None

    def test_run_settings_validation(self):
        assert RunSettings(tiles=8).tiles == (8,)
        for bad in (dict(mode="x"), dict(tiles=(0,)), dict(prefill_len=1), dict(trials=0)):
            with pytest.raises(ConfigError):
                RunSettings(**bad)

    def test_type_error_becomes_config_error(self):
        with pytest.raises(ConfigError):
            resolve(model={"d_model": "wide"})


class TestSpeedupModel:
    def test_calibrated_constant_reproduces(self):
        assert calibrate_nl_cost() == pytest.approx(CALIBRATED_NL_CYCLES, rel=1e-3)

    def test_target_ratio_at_512(self):
        w = Workload(prefill_len=512)
        ratio = mha_speedup_model(w, "KVReuse+OPT").speedup / mha_speedup_model(w, "KVReuse").speedup
        assert ratio == pytest.approx(1.40 / 1.29, rel=1e-3)

    def test_variant_ordering(self):
        for n in (128, 512, 2048):
            s = [mha_speedup_model(Workload(prefill_len=n), v).speedup for v in VARIANTS]
            assert s[0] == 1.0 and s[0] < s[1] < s[2] < s[3]

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.01, 0.95), st.integers(16, 4096), st.integers(1, 4096))
    def test_speedup_nondecreasing_in_prefill(self, p, n, dn):
        for v in VARIANTS:
            a = mha_speedup_model(Workload(prefill_len=n), v, skip_prob=p).speedup
            b = mha_speedup_model(Workload(prefill_len=n + dn), v, skip_prob=p).speedup
            assert b >= a * (1 - 1e-12)

    def test_stage_structure(self):
        st_ = mha_stages(256, "KVReuse+OPT", PerfParams(), 0.25)
        assert [s.name for s in st_] == ["qkv", "attention", "o_proj"]
        assert all(s.bubble == 0 for s in st_)
        assert HEAD_EFFICIENCY[True] == 2 * HEAD_EFFICIENCY[False]

    def test_no_skip_no_gain_without_opt(self):
        for v in ("PartialSkip", "KVReuse"):
            assert mha_speedup_model(Workload(prefill_len=256), v, skip_prob=0.0).speedup == pytest.approx(1.0)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            mha_stages(8, "Turbo", PerfParams(), 0.25)
        with pytest.raises(ValueError):
            mha_stages(8, "KVReuse", PerfParams(), 1.0)
        with pytest.raises(ValueError):
            calibrate_nl_cost(target_ratio=50.0)

    def test_csv(self):
        text = speedup_csv(speedup_grid((128,)))
        lines = text.strip().splitlines()
        assert lines[0].startswith("prefill_len,variant,cycles") and len(lines) == 5


class TestDecodeModel:
    WL = [Workload(prefill_len=512, decode_len=d) for d in (128, 256, 512, 1024)]

    def test_zero_contention_gap_constant(self):
        e = decode_speedup_trend(self.WL, contention=False, utilizations=UTIL)
        gaps = [decode_gap(e, w.decode_len) for w in self.WL]
        assert max(gaps) - min(gaps) <= 1e-6 * max(gaps)

    def test_contention_gap_narrows(self):
        e = decode_speedup_trend(self.WL, utilizations=UTIL)
        gaps = [decode_gap(e, w.decode_len) for w in self.WL]
        assert all(b < a for a, b in zip(gaps, gaps[1:]))

    def test_ordering_holds(self):
        e = decode_speedup_trend(self.WL, utilizations=UTIL)
        for w in self.WL:
            s = {x.variant: x.speedup for x in e if x.decode_len == w.decode_len}
            assert s["Baseline"] < s["PartialSkip"] < s["KVReuse"] < s["KVReuse+OPT"]

    def test_csv(self):
        text = decode_csv(decode_speedup_trend(self.WL[:1], utilizations=UTIL))
        assert text.splitlines()[0].startswith("decode_len,variant,cycles_per_step")

    def test_perf_params_validation(self):
        with pytest.raises(ConfigError):
            PerfParams(ddr_gbps=0)
        assert dataclasses.replace(PerfParams(), nl_cycles_per_element=0.1).nl_cycles_per_element == 0.1
