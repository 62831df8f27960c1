"""Scalar reference model of one mixed-precision PE column.

A column multiplies 64 activation/weight lanes, converts the products to a
block-floating-point vector sharing one exponent, sums the mantissas in
integer arithmetic and rounds to FP16 exactly once at the end.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .dsp import pack_fp16_pair, recover_dual_products
from .fp16 import Fp16Bits, Int4Val, encode_fp16, flush_subnormal, round_scaled_to_fp16

IMPLS = ("IMPL1", "IMPL2", "IMPL3")
MODES = ("fp16_fp16", "fp16_int4")
PRODUCT_WIDTH = {"IMPL1": 22, "IMPL2": 15, "IMPL3": 15}
RAW_PRODUCT_BITS = 22  # 11-bit x 11-bit significands
INT4_PRODUCT_BITS = 15  # signed 11-bit significand x signed 4-bit weight


@dataclass(frozen=True)
class PeColumnConfig:
    depth: int = 64
    mode: str = "fp16_fp16"
    impl: str = "IMPL1"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.impl not in IMPLS:
            raise ValueError(f"unknown impl {self.impl!r}")
        if self.depth <= 0:
            raise ValueError("depth must be positive")

    @property
    def product_width(self) -> int:
        return PRODUCT_WIDTH[self.impl]


@dataclass(frozen=True)
class ProductTriple:
    """One lane product: (-1)**sign * mantissa * 2**(exponent - frac_bits).

    FP16xFP16 lanes keep a non-negative magnitude with a separate sign bit.
    FP16xINT4 lanes carry the sign inside a two's-complement mantissa and
    leave ``sign`` at 0.
    """
    mantissa: int
    exponent: int
    sign: int
    frac_bits: int
    width: int

    @property
    def value(self) -> float:
        v = self.mantissa * 2.0 ** (self.exponent - self.frac_bits)
        return -v if self.sign else v


@dataclass(frozen=True)
class BfpBlock:
    shared_exponent: int
    mantissas: tuple[int, ...]
    lane_count: int
    width: int
    frac_bits: int

    @property
    def sum_width(self) -> int:
        return self.width + max(1, (self.lane_count - 1).bit_length())

    def exact_sum(self) -> int:
        return sum(self.mantissas)

    def value(self) -> float:
        """Wide-precision value of the block (exact for 64 lanes)."""
        return self.exact_sum() * 2.0 ** (self.shared_exponent - self.frac_bits)


def _truncate(p: int, impl: str) -> tuple[int, int, int]:
    w = PRODUCT_WIDTH[impl]
    drop = RAW_PRODUCT_BITS - w
    return p >> drop, 20 - drop, w


def fp16_pair_multiply(x: Fp16Bits, w0: Fp16Bits, w1: Fp16Bits,
                       impl: str = "IMPL1") -> tuple[ProductTriple, ProductTriple]:
    """Two concurrent FP16 products sharing the activation ``x``.

    Significands go through one overpacked DSP operation; signs are XORed and
    exponents added. Subnormal operands are treated as zero.
    """
    x, w0, w1 = (flush_subnormal(b)[0] for b in (x, w0, w1))
    p0, p1 = recover_dual_products(pack_fp16_pair(w0.significand, w1.significand, x.significand))
    out = []
    for w, p in ((w0, p0), (w1, p1)):
        m, frac, width = _truncate(p, impl)
        e = x.unbiased_exponent + w.unbiased_exponent
        out.append(ProductTriple(m, e, x.sign ^ w.sign, frac, width))
    return out[0], out[1]


def fp16_int4_multiply(x: Fp16Bits, w0: Int4Val, w1: Int4Val) -> tuple[ProductTriple, ProductTriple]:
    """Signed 15-bit products of the FP16 significand with two INT4 weights."""
    x = flush_subnormal(x)[0]
    sig = -x.significand if x.sign else x.significand
    return tuple(
        ProductTriple(sig * int(w.value), x.unbiased_exponent, 0, 10, INT4_PRODUCT_BITS)
        for w in (w0, w1))


def bfp_align(lanes: Sequence[ProductTriple], width: int) -> BfpBlock:
    """Align lane products to the largest exponent among nonzero lanes.

    Products narrower than ``width`` are left-justified into the field first
    (guard bits). The stored mantissa is then shifted right: for a magnitude
    this truncates toward zero, for a two's-complement value it rounds toward
    minus infinity.
    """
    if not lanes:
        raise ValueError("empty lane list")
    frac = None
    padded = []
    for t in lanes:
        if t.width > width:
            raise ValueError(f"product width {t.width} exceeds field width {width}")
        pad = width - t.width
        padded.append((t.mantissa << pad, t.exponent, t.sign))
        f = t.frac_bits + pad
        if frac is None:
            frac = f
        elif frac != f:
            raise ValueError("lanes disagree on fixed-point scaling")
    live = [e for m, e, _ in padded if m != 0]
    shared = max(live) if live else 0
    mants = []
    for m, e, s in padded:
        if m == 0:
            mants.append(0)
            continue
        a = m >> (shared - e)
        mants.append(-a if s else a)
    return BfpBlock(shared, tuple(mants), len(lanes), width, frac)


def bfp_accumulate_finalize(block: BfpBlock) -> Fp16Bits:
    """Exact integer sum, then one round-to-nearest-even into FP16.

    Sums beyond the finite range saturate to +-65504.
    """
    s = block.exact_sum()
    return round_scaled_to_fp16(int(s < 0), abs(s), block.shared_exponent - block.frac_bits,
                                saturate=True)


@dataclass(frozen=True)
class PeResult:
    out: Fp16Bits
    block: BfpBlock
    flushed: int = field(default=0)


def _as_fp16(v) -> Fp16Bits:
    if isinstance(v, Fp16Bits):
        return v
    return encode_fp16(v)


def _as_int4(v) -> Int4Val:
    return v if isinstance(v, Int4Val) else Int4Val(int(v))


def _lanes(xs, wa, wb, cfg):
    la: list[ProductTriple] = []
    lb: list[ProductTriple] = []
    for k in range(cfg.depth):
        if cfg.mode == "fp16_fp16":
            a, b = fp16_pair_multiply(xs[k], wa[k], wb[k], cfg.impl)
        else:
            a, b = fp16_int4_multiply(xs[k], wa[k], wb[k])
        la.append(a)
        lb.append(b)
    return la, lb


def pe_dot_pair_detailed(x: Sequence, wa: Sequence, wb: Sequence,
                         cfg: PeColumnConfig = PeColumnConfig()) -> tuple[PeResult, PeResult]:
    """Two adjacent PE columns sharing the activation vector ``x``.

    Lane k of both columns is one overpacked DSP operation computing
    x[k]*wa[k] and x[k]*wb[k].
    """
    if not (len(x) == len(wa) == len(wb) == cfg.depth):
        raise ValueError(f"expected {cfg.depth} lanes, got {len(x)}, {len(wa)}, {len(wb)}")
    xs = [_as_fp16(v) for v in x]
    if cfg.mode == "fp16_fp16":
        wa, wb = [_as_fp16(v) for v in wa], [_as_fp16(v) for v in wb]
        fa = sum(b.is_subnormal for b in wa)
        fb = sum(b.is_subnormal for b in wb)
    else:
        wa, wb = [_as_int4(v) for v in wa], [_as_int4(v) for v in wb]
        fa = fb = 0
    fx = sum(b.is_subnormal for b in xs)
    la, lb = _lanes(xs, wa, wb, cfg)
    out = []
    for lanes, fw in ((la, fa), (lb, fb)):
        block = bfp_align(lanes, cfg.product_width)
        out.append(PeResult(bfp_accumulate_finalize(block), block, fx + fw))
    return out[0], out[1]


def pe_dot_detailed(x: Sequence, w: Sequence, cfg: PeColumnConfig = PeColumnConfig()) -> PeResult:
    if len(w) != cfg.depth:
        raise ValueError(f"expected {cfg.depth} weight lanes, got {len(w)}")
    return pe_dot_pair_detailed(x, w, w, cfg)[0]


def pe_dot(x: Sequence, w: Sequence, cfg: PeColumnConfig = PeColumnConfig()) -> Fp16Bits:
    """One PE column: FP16 activations against FP16 or INT4 weights."""
    return pe_dot_detailed(x, w, cfg).out
