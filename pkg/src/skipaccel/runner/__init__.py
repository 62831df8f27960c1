"""Toy inference engine and analytic performance model."""
from .config import (ConfigError, ModelConfig, PerfParams, ResolvedConfig, RunSettings, Workload,
                     load_config, parse_config, resolve)
from .engine import InferenceState, RunResult, reference_forward, run_decode, run_prefill
from .model import LayerWeights, ToyModel, build_toy_model, calibrate_router_bias
from .perf import (CALIBRATED_NL_CYCLES, VARIANTS, DecodeEntry, SpeedupEntry, calibrate_nl_cost,
                   decode_csv, decode_gap, decode_speedup_trend, kv_utilizations, mha_speedup_model,
                   mha_stages, speedup_csv, speedup_grid)

__all__ = [n for n in dir() if not n.startswith("_")]
