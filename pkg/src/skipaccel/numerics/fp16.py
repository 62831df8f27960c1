"""Bit-level IEEE-754 binary16 values.

The integer encoder here is the reference for every other FP16 path in the
package (the numpy cast and the compiled kernel are checked against it).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EXP_BIAS = 15
FRAC_BITS = 10
MAX_EXP_FIELD = 30
FP16_MAX = 65504.0
HIDDEN = 1 << FRAC_BITS


class Fp16RangeError(ValueError):
    """Raised for NaN, infinity or magnitudes outside the finite binary16 range."""


@dataclass(frozen=True)
class Fp16Bits:
    sign: int
    exponent: int
    fraction: int

    def __post_init__(self):
        if self.sign not in (0, 1):
            raise ValueError(f"sign must be 0 or 1, got {self.sign}")
        if not 0 <= self.exponent <= 31:
            raise ValueError(f"exponent field out of range: {self.exponent}")
        if not 0 <= self.fraction < HIDDEN:
            raise ValueError(f"fraction field out of range: {self.fraction}")
        if self.exponent == 31:
            raise Fp16RangeError("NaN/Inf encodings are not accepted")

    @classmethod
    def from_bits(cls, bits: int) -> "Fp16Bits":
        bits = int(bits) & 0xFFFF
        return cls(bits >> 15, (bits >> 10) & 0x1F, bits & 0x3FF)

    @property
    def bits(self) -> int:
        return (self.sign << 15) | (self.exponent << 10) | self.fraction

    @property
    def is_zero(self) -> bool:
        return self.exponent == 0 and self.fraction == 0

    @property
    def is_subnormal(self) -> bool:
        return self.exponent == 0 and self.fraction != 0

    @property
    def significand(self) -> int:
        """11-bit significand with the hidden bit; 0 for zero/subnormal."""
        if self.exponent == 0:
            return 0 if self.fraction == 0 else self.fraction
        return HIDDEN + self.fraction

    @property
    def unbiased_exponent(self) -> int:
        return (self.exponent if self.exponent else 1) - EXP_BIAS

    def to_float(self) -> float:
        return decode_fp16(self)

    def __neg__(self) -> "Fp16Bits":
        return Fp16Bits(self.sign ^ 1, self.exponent, self.fraction)


def decode_fp16(b: Fp16Bits) -> float:
    if b.exponent == 0:
        mag = math.ldexp(b.fraction, -24)
    else:
        mag = math.ldexp(HIDDEN + b.fraction, b.exponent - 25)
    return -mag if b.sign else mag


def _rne_shift(m: int, s: int) -> int:
    """Round m * 2**-s to the nearest integer, ties to even (m >= 0)."""
    if s <= 0:
        return m << -s
    q = m >> s
    rem = m - (q << s)
    half = 1 << (s - 1)
    if rem > half or (rem == half and q & 1):
        q += 1
    return q


def round_scaled_to_fp16(sign: int, mag: int, exp2: int, saturate: bool = False) -> Fp16Bits:
    """Round the exact value (-1)**sign * mag * 2**exp2 to binary16 (RNE).

    With ``saturate`` an overflow clamps to the largest finite value instead
    of raising.
    """
    if mag < 0:
        raise ValueError("magnitude must be non-negative")
    if mag == 0:
        return Fp16Bits(sign, 0, 0)
    top = mag.bit_length() - 1 + exp2  # floor(log2(value))
    if top >= 1 - EXP_BIAS:
        q = _rne_shift(mag, mag.bit_length() - 11)
        if q == 2 * HIDDEN:
            q = HIDDEN
            top += 1
        if top > EXP_BIAS:
            if saturate:
                return Fp16Bits(sign, MAX_EXP_FIELD, HIDDEN - 1)
            raise Fp16RangeError(f"value overflows binary16 (2**{top})")
        return Fp16Bits(sign, top + EXP_BIAS, q - HIDDEN)
    # subnormal range, quantum 2**-24
    q = _rne_shift(mag, -24 - exp2)
    if q == HIDDEN:
        return Fp16Bits(sign, 1, 0)
    return Fp16Bits(sign, 0, q)


def encode_fp16(x: float) -> Fp16Bits:
    """Nearest binary16 value to ``x`` (round to nearest, ties to even)."""
    x = float(x)
    if math.isnan(x) or math.isinf(x):
        raise Fp16RangeError(f"cannot encode {x}")
    sign = 1 if math.copysign(1.0, x) < 0 else 0
    num, den = abs(x).as_integer_ratio()
    return round_scaled_to_fp16(sign, num, -(den.bit_length() - 1))


@dataclass(frozen=True)
class Int4Val:
    value: int

    def __post_init__(self):
        if not -8 <= int(self.value) <= 7:
            raise ValueError(f"INT4 value out of range: {self.value}")


def flush_subnormal(b: Fp16Bits) -> tuple[Fp16Bits, bool]:
    if b.is_subnormal:
        return Fp16Bits(b.sign, 0, 0), True
    return b, False


# -- array helpers ---------------------------------------------------------

def to_fp16_bits(x) -> np.ndarray:
    """Vectorized RNE encode of real values into uint16 bit patterns."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise Fp16RangeError("non-finite input")
    with np.errstate(over="ignore"):  # overflow is reported below
        h = x.astype(np.float16)
    if np.any(np.isinf(h)):
        raise Fp16RangeError("input outside binary16 range")
    return h.view(np.uint16)


def from_fp16_bits(bits) -> np.ndarray:
    return np.asarray(bits, dtype=np.uint16).view(np.float16).astype(np.float64)


def flush_subnormal_bits(bits: np.ndarray) -> tuple[np.ndarray, int]:
    bits = np.asarray(bits, dtype=np.uint16)
    sub = ((bits & 0x7C00) == 0) & ((bits & 0x03FF) != 0)
    out = np.where(sub, bits & 0x8000, bits).astype(np.uint16)
    return out, int(sub.sum())


def check_finite_bits(bits: np.ndarray) -> None:
    if np.any((np.asarray(bits, dtype=np.uint16) & 0x7C00) == 0x7C00):
        raise Fp16RangeError("NaN/Inf encodings are not accepted")
