"""Fused router/normalization and two-pass attention dataflows with references."""
from .attention import (SoftmaxFeatures, fused_attention, mask_value, normalize_scores,
                        online_softmax_update, reference_attention, score_pass, value_pass)
from .npe import interleave_gate_up, npe_div, npe_exp, rope_apply, rope_table, silu, split_gate_up, swiglu
from .precision import DEVICE, MODES, PE_DEPTH, WIDE, Precision, device_matmul
from .router import (EPS, DegenerateRowError, RowStats, fused_router_submodule, normalize_selected,
                     reference_router_submodule, router_stats_pass)
from .routing import (EXECUTE, FFN, MHA, SKIP, GumbelConfig, ProvenanceError, RouteMask, RouterParams,
                      RoutingError, gumbel_route, kv_fallback_resolve, provenance_table)
from .tiles import AccessProbe, OffChipStore, TileSpec, blocks, pad_to

__all__ = [n for n in dir() if not n.startswith("_")]
