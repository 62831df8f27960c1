"""KV-cache mapping, scheduling, buffer, traces and bandwidth accounting."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skipaccel.dataflow import RouteMask
from skipaccel.kvsim import (BufferConfig, HbmConfig, InvarianceBuffer, KvGeometry, KvSimConfig,
                             LayoutError, ScheduleError, SimulationPlan, TraceError,
                             TraceParseError, check_rounds, kv_storage_accounting,
                             lookahead_update, map_tokens, parse_trace, read_trace,
                             reports_to_csv, retention_set, schedule_attention, simulate_sequence,
                             synthetic_trace, trace_from_mask, with_penalty, write_trace)
from skipaccel.kvsim import _sched_py
from skipaccel.kvsim.schedule import LayoutBook, RoundSchedule
from skipaccel.kvsim.trace import format_trace


def small_cfg(n_ports=4, n_channels=2, n_read=2, n_write=2, buffer_bits=512, capacity=64,
              page_bytes=1024, **hbm):
    return KvSimConfig(
        hbm=HbmConfig(n_ports=n_ports, n_physical_channels=n_channels,
                      peak_bw_gbps=n_ports * 32 * 0.45, page_size_bytes=page_bytes, **hbm),
        buffer=BufferConfig(capacity_tokens=capacity, n_read_ports=n_read, n_write_ports=n_write,
                            port_width_bits=buffer_bits),
        geometry=KvGeometry(d_model=256, dw_bits=16))


def widths(rounds):
    return [r.width for r in rounds]


class TestConfig:
    def test_default_span(self):
        assert KvSimConfig().span_beats == 256

    def test_peak_consistency(self):
        with pytest.raises(ValueError):
            HbmConfig(peak_bw_gbps=300.0)

    def test_port_map_must_be_onto(self):
        with pytest.raises(ValueError):
            HbmConfig(n_ports=4, n_physical_channels=2, peak_bw_gbps=57.6, port_to_channel=(0, 0, 0, 0))
        h = HbmConfig(n_ports=4, n_physical_channels=2, peak_bw_gbps=57.6, port_to_channel=(1, 0, 1, 0))
        assert h.channel_map() == (1, 0, 1, 0)

    def test_span_must_be_whole_beats(self):
        with pytest.raises(ValueError):
            KvGeometry(d_model=10, dw_bits=16).span_beats(256)


class TestLayout:
    def test_token_wise_round_robin(self):
        mha = np.ones((2, 8), dtype=bool)
        lay = map_tokens(mha, 1, "token_wise", small_cfg())
        assert lay.ports.tolist() == [0, 1, 2, 3, 0, 1, 2, 3]
        assert all(len(lay.ports_of(k, 4)) == 1 for k in range(8))
        # contiguous per port: consecutive entries on a port are one span apart
        assert lay.base_address[4] - lay.base_address[0] == lay.token_span_beats

    def test_token_wise_compacts_skipped_tokens(self):
        mha = np.ones((2, 6), dtype=bool)
        mha[1, [1, 3]] = False
        lay = map_tokens(mha, 1, "token_wise", small_cfg())
        assert lay.tokens.tolist() == [0, 2, 4, 5]
        assert lay.ports.tolist() == [0, 1, 2, 3]

    @pytest.mark.parametrize("policy", ["dense_interleaved", "interleaved_skip"])
    def test_interleaved_stripes_over_all_ports(self, policy):
        mha = np.ones((1, 5), dtype=bool)
        lay = map_tokens(mha, 0, policy, small_cfg(interleave_beats=4))
        assert lay.n_chunks == 4
        assert all(lay.ports_of(k, 4) == [0, 1, 2, 3] for k in range(5))

    def test_dense_reserves_skipped_slots(self):
        mha = np.ones((2, 4), dtype=bool)
        mha[1, 1] = False
        assert map_tokens(mha, 1, "dense_interleaved", small_cfg()).tokens.tolist() == [0, 1, 2, 3]
        assert map_tokens(mha, 1, "interleaved_skip", small_cfg()).tokens.tolist() == [0, 2, 3]

    def test_capacity_exceeded(self):
        cfg = KvSimConfig(hbm=HbmConfig(port_capacity_bytes=1 << 16))
        with pytest.raises(LayoutError):
            map_tokens(np.ones((32, 4096), dtype=bool), 0, "token_wise", cfg)

    def test_unknown_policy(self):
        with pytest.raises(LayoutError):
            map_tokens(np.ones((1, 2), dtype=bool), 0, "diagonal", small_cfg())


class TestBuffer:
    def _buf(self, cap=8):
        return InvarianceBuffer(BufferConfig(capacity_tokens=cap))

    def test_next_layer_executes_all(self):
        b = self._buf()
        assert lookahead_update(b, np.ones(5, bool), np.arange(5), np.zeros(5)) == {}

    def test_next_layer_skips_all(self):
        b = self._buf()
        res = lookahead_update(b, np.zeros(5, bool), np.arange(5), np.array([0, 1, 0, 2, 1]))
        assert res == {0: 0, 1: 1, 2: 0, 3: 2, 4: 1}
        assert b.valid

    @given(st.lists(st.booleans(), min_size=1, max_size=30), st.integers(0, 10 ** 6))
    def test_mixed_matches_set_oracle(self, nxt, seed):
        rng = np.random.default_rng(seed)
        n = len(nxt)
        tokens = np.arange(n)
        prov = rng.integers(0, 4, n)
        seen = rng.random(n) < 0.7
        b = self._buf(cap=n)
        res = lookahead_update(b, np.array(nxt), tokens, prov, in_flight=seen)
        want = {int(t): int(p) for t, p, x, s in zip(tokens, prov, nxt, seen) if not x and s}
        assert res == want

    def test_eviction_oldest_provenance_first(self):
        keep, ev = retention_set(np.arange(4), np.array([3, 1, 2, 1]), np.ones(4, bool), 2)
        assert ev == 2 and keep.tolist() == [True, False, True, False]

    def test_last_layer_clears(self):
        b = self._buf()
        b.residency = {1: 0}
        assert lookahead_update(b, None, [1], [0]) == {}

    def test_capacity_invariant(self):
        with pytest.raises(ValueError):
            InvarianceBuffer(BufferConfig(capacity_tokens=1), residency={0: 0, 1: 0})


class TestSchedule:
    """Four-port fixture: two buffer read and two buffer write ports."""

    def _book(self, mha, cfg=None):
        return LayoutBook(np.asarray(mha, dtype=bool), "token_wise", cfg or small_cfg())

    def test_reused_round_limited_to_two(self):
        mha = np.ones((2, 4), dtype=bool)
        mha[1] = False
        buf = InvarianceBuffer(BufferConfig(n_read_ports=2, n_write_ports=2), {t: 0 for t in range(4)}, True)
        needed = [(t, 0) for t in range(4)]
        rounds = schedule_attention(needed, buf, self._book(mha), layer=1)
        assert widths(rounds) == [2, 2]
        assert all(r.buffer_reads and not r.hbm_fetches for r in rounds)
        check_rounds(rounds, needed, small_cfg())

    def test_current_layer_round_capped_by_proactive_writes(self):
        mha = np.ones((2, 4), dtype=bool)
        mha[1, :3] = False  # tokens 0-2 are reused at the next layer
        buf = InvarianceBuffer(BufferConfig(n_read_ports=2, n_write_ports=2), {}, True)
        needed = [(t, 0) for t in range(4)]
        rounds = schedule_attention(needed, buf, self._book(mha), layer=0, next_exec=mha[1])
        assert widths(rounds) == [3, 1]
        assert rounds[0].proactive_writes == [0, 1] and rounds[1].proactive_writes == [2]
        check_rounds(rounds, needed, small_cfg())

    def test_single_channel_serializes(self):
        cfg = small_cfg(n_channels=1)
        mha = np.ones((1, 5), dtype=bool)
        needed = [(t, 0) for t in range(5)]
        rounds = schedule_attention(needed, None, self._book(mha, cfg), layer=0)
        assert widths(rounds) == [1] * 5
        check_rounds(rounds, needed, cfg)

    def test_invalid_buffer_uses_channel_constraint(self):
        mha = np.ones((1, 4), dtype=bool)
        needed = [(t, 0) for t in range(4)]
        rounds = schedule_attention(needed, None, self._book(mha), layer=0)
        assert widths(rounds) == [2, 2]  # 4 ports on 2 channels

    def test_unmapped_entry_is_trace_error(self):
        mha = np.ones((2, 3), dtype=bool)
        mha[1, 2] = False
        with pytest.raises(TraceError):
            schedule_attention([(2, 1)], None, self._book(mha), layer=1)

    def test_check_rounds_catches_violations(self):
        cfg = small_cfg()
        bad = RoundSchedule(0, hbm_fetches=[(0, (1,)), (1, (1,))], case1=True)
        with pytest.raises(ScheduleError):
            check_rounds([bad], [(0, 0), (1, 0)], cfg)
        too_many = RoundSchedule(0, buffer_reads=[0, 1, 2])
        with pytest.raises(ScheduleError):
            check_rounds([too_many], [(0, 0), (1, 0), (2, 0)], cfg)
        with pytest.raises(ScheduleError):
            check_rounds([RoundSchedule(0, buffer_reads=[0])], [(0, 0), (1, 0)], cfg)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10 ** 6), st.sampled_from(["dense_interleaved", "interleaved_skip", "token_wise"]),
           st.booleans())
    def test_every_emitted_schedule_is_legal(self, seed, policy, use_buffer):
        cfg = small_cfg(n_read=1 + seed % 3, n_write=1 + seed % 2)
        trace, mask = synthetic_trace(5, 12, 6, 0.35, seed=seed, stride=2)
        book = LayoutBook(mask.mha, policy, cfg)
        buf = InvarianceBuffer(cfg.buffer) if use_buffer else None
        for r in trace.records:
            if not r.attend:
                if buf:
                    buf.invalidate()
                continue
            needed = list(zip(r.needed_tokens.tolist(), r.needed_prov.tolist()))
            rounds = schedule_attention(needed, buf, book, r.layer, r.lookahead)
            check_rounds(rounds, needed, cfg)


class TestCost:
    def _cost(self, rnd, g0, cfg, src=None, base=None):
        n = len(rnd)
        src = np.zeros(n, np.int8) if src is None else np.asarray(src, np.int8)
        base = np.zeros(n, np.int64) if base is None else np.asarray(base, np.int64)
        h = cfg.hbm
        return _sched_py.round_costs(np.asarray(rnd), src, np.asarray(g0), base, cfg.span_beats, 1,
                                     h.n_ports, h.page_beats, h.page_hit_cycles_per_beat, 0.0,
                                     cfg.buffer_entry_cycles)

    def test_one_token_costs_its_span(self):
        cfg = small_cfg()
        assert self._cost([0], [0], cfg)[0] == cfg.span_beats

    def test_parallel_tokens_overlap(self):
        cfg = small_cfg()
        assert self._cost([0, 0], [0, 2], cfg)[0] == self._cost([0], [0], cfg)[0]

    def test_buffer_reads_only_cost_alone(self):
        cfg = small_cfg()
        with_hbm = self._cost([0, 0], [0, 1], cfg, src=[0, 1])[0]
        alone = self._cost([0], [0], cfg, src=[1])[0]
        assert with_hbm == cfg.span_beats and alone == cfg.buffer_entry_cycles

    def test_penalty_independent_schedule(self):
        trace, _ = synthetic_trace(4, 16, 4, 0.25, seed=1)
        plan = SimulationPlan(trace, "interleaved_skip", False, small_cfg())
        c0, m = plan.cost(0.0)
        c1, _ = plan.cost(1.0)
        assert m > 0 and c1 > c0


class TestBackends:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10 ** 6), st.booleans())
    def test_compiled_matches_python(self, seed, case1):
        from skipaccel.kvsim import schedule
        if schedule.BACKEND != "cython":
            pytest.skip("compiled scheduler not built")
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 60))
        pm = (np.uint64(1) << rng.integers(0, 8, n).astype(np.uint64)).astype(np.uint64)
        cm = (np.uint64(1) << rng.integers(0, 4, n).astype(np.uint64)).astype(np.uint64)
        src = rng.integers(0, 3, n).astype(np.int8)
        want = rng.integers(0, 2, n).astype(np.int8)
        args = (pm, cm, src, want, case1, 2, 1, int(rng.integers(1, 10)))
        a, b = schedule._sched.first_fit(*args), _sched_py.first_fit(*args)
        np.testing.assert_array_equal(np.asarray(a[0]), b[0])
        np.testing.assert_array_equal(np.asarray(a[1]), b[1])
        assert a[2] == b[2]
        rnd = np.sort(b[0])
        g0 = rng.integers(0, 64, n).astype(np.int64)
        base = rng.integers(0, 4, n).astype(np.int64) * 32
        cargs = (rnd, src, g0, base, 8, 2, 8, 16, 1.0, 3.5, 12.0)
        ca, pa = schedule._sched.round_costs(*cargs), _sched_py.round_costs(*cargs)
        assert tuple(ca) == pytest.approx(tuple(pa))


class TestSimulation:
    def test_conservation(self):
        trace, _ = synthetic_trace(6, 20, 8, 0.3, seed=2, stride=2)
        cfg = small_cfg()
        needed = sum(len(r.needed_tokens) for r in trace.records)
        writes = sum(r.attend for r in trace.records)
        for policy in ("interleaved_skip", "token_wise"):
            for buf in (False, True):
                rep = simulate_sequence(trace, policy, buf, cfg)
                entry = cfg.geometry.entry_bytes
                assert rep.hbm_bytes + rep.buffer_bytes == needed * entry
                assert rep.write_bytes == writes * entry
                assert rep.aggregate_effective_gbps >= rep.effective_hbm_gbps
                assert rep.hbm_utilization_pct <= 100.0

    def test_deterministic(self):
        trace, _ = synthetic_trace(4, 16, 4, 0.25, seed=3)
        a = simulate_sequence(trace, "token_wise", True, small_cfg())
        b = simulate_sequence(trace, "token_wise", True, small_cfg())
        assert a == b

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(0.05, 0.6), st.sampled_from([(2, 512), (4, 256), (1, 1024)]),
           st.integers(1, 4), st.floats(0.0, 40.0))
    def test_buffer_never_slower_when_it_matches_hbm_bandwidth(self, seed, skip, read, nw, penalty):
        nr, bits = read  # nr * bits >= n_ports * port_width
        cfg = with_penalty(small_cfg(n_read=nr, buffer_bits=bits, n_write=nw), penalty)
        trace, _ = synthetic_trace(5, 16, 6, skip, seed=seed, stride=2)
        off = simulate_sequence(trace, "token_wise", False, cfg).total_cycles
        on = simulate_sequence(trace, "token_wise", True, cfg).total_cycles
        assert on <= off + 1e-9

    def test_narrow_buffer_can_be_slower(self):
        # one 32-bit read port: a buffer-only round costs 8x an HBM fetch
        cfg = small_cfg(n_read=1, n_write=4, buffer_bits=32)
        trace, _ = synthetic_trace(6, 24, 8, 0.4, seed=0, stride=2)
        off = simulate_sequence(trace, "token_wise", False, cfg).total_cycles
        on = simulate_sequence(trace, "token_wise", True, cfg).total_cycles
        assert on > off

    def test_report_csv(self):
        trace, _ = synthetic_trace(3, 8, 2, 0.25, seed=0)
        text = reports_to_csv([simulate_sequence(trace, "token_wise", False, small_cfg())])
        assert text.splitlines()[0].startswith("policy,use_buffer,steps")


class TestTrace:
    def test_round_trip(self, tmp_path):
        trace, mask = synthetic_trace(4, 10, 5, 0.3, seed=4)
        path = tmp_path / "t.txt"
        write_trace(trace, path)
        back = read_trace(path)
        assert format_trace(back) == format_trace(trace)
        np.testing.assert_array_equal(back.mha_mask()[:, :trace.n_tokens], mask.mha[:, :trace.n_tokens])

    @pytest.mark.parametrize("line, msg", [
        ("1 0 1", "expected 5 fields"),
        ("1 0 2 - needed:(0,0)", "attend flag"),
        ("x 0 1 - needed:(0,0)", "integers"),
        ("1 0 1 zz needed:(0,0)", "look-ahead"),
        ("1 0 1 - (0,0)", "needed:"),
        ("1 0 1 - needed:(0,0)junk", "malformed"),
    ])
    def test_parse_errors_carry_line_numbers(self, line, msg):
        with pytest.raises(TraceParseError, match=msg) as exc:
            parse_trace("# layers=1\n\n" + line + "\n")
        assert exc.value.lineno == 3

    def test_inconsistent_provenance_rejected(self):
        text = "# layers=2\n1 0 1 0 needed:(0,0)\n1 1 1 - needed:(0,1)\n"
        with pytest.raises(TraceError, match="provenance"):
            parse_trace(text)

    def test_contradicting_records_rejected(self):
        text = ("# layers=2\n1 0 1 1 needed:(0,0)\n1 1 1 - needed:(0,1)\n"
                "2 0 1 2 needed:(0,0),(1,0)\n2 1 1 - needed:(0,0),(1,1)\n")
        with pytest.raises(TraceError, match="contradicts"):
            parse_trace(text)

    def test_trace_from_mask_positions_checked(self):
        with pytest.raises(TraceError):
            trace_from_mask(np.ones((2, 4), dtype=bool), [4])


class TestStorage:
    def test_no_skip(self):
        assert kv_storage_accounting(np.ones((4, 10), dtype=bool)).reduction_pct == 0.0

    def test_all_skip_above_layer0(self):
        mha = np.zeros((8, 10), dtype=bool)
        mha[0] = True
        assert kv_storage_accounting(mha).reduction_pct == pytest.approx(100 * 7 / 8)

    @pytest.mark.parametrize("L", [8, 32])
    def test_bernoulli_expectation(self, L):
        rng = np.random.default_rng(L)
        red = [kv_storage_accounting(RouteMask.bernoulli(L, 512, 0.25, rng)).reduction_pct
               for _ in range(50)]
        assert np.mean(red) == pytest.approx(25 * (L - 1) / L, abs=0.3)

    def test_seq_len_slice(self):
        mha = np.ones((2, 6), dtype=bool)
        mha[1, 4:] = False
        assert kv_storage_accounting(mha, seq_len=4).reduction_pct == 0.0
        with pytest.raises(ValueError):
            kv_storage_accounting(mha, seq_len=7)
