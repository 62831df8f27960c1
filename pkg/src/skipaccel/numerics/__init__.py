"""Bit-level FP16/INT4 arithmetic of the packed-DSP processing element."""
from .dsp import InfeasiblePacking, PackedPair, RecoveryError, pack_fp16_pair, recover_dual_products
from .fp16 import Fp16Bits, Fp16RangeError, Int4Val, decode_fp16, encode_fp16, from_fp16_bits, to_fp16_bits
from .kernels import BACKEND, naive_mac, pe_dot_fp16, pe_dot_int4
from .pe import IMPLS, MODES, PeColumnConfig, PeResult, pe_dot, pe_dot_detailed
from .quant import QuantizedWeight, quantize_int4
from .sweep import DISTRIBUTIONS, ErrorRow, error_metric, error_sweep, ordering_failures, sweep_csv

__all__ = [n for n in dir() if not n.startswith("_")]
