"""DSP48E2-style multiply-accumulate and dual-product packing.

Three packings place two significand products u0*v and u1*v into a single
27x18 multiply:

``standard``
    u1 sits 2n bits above u0 on the A/D side. Needs 3n bits of A and is
    rejected when that exceeds the 27-bit port (it does for n=11).
``overpacked``
    u1 is shifted only 2n-7 bits up, so the two products overlap in 7
    bits. A 7-bit auxiliary multiply supplies the lost low bits of u1*v and
    the C-port cancels the overlap.
``overpacked_truncated``
    The LSB of u0 and the MSB of u1 are removed before packing. The
    remaining u1 field is routed through the pre-adder with a negative sign,
    which lets every correction (the dropped LSB of u0, the dropped MSB of
    u1 and the overlap cancellation) be injected as one C-port term, and
    the auxiliary multiply shrinks to 5 bits.

For ``overpacked_truncated`` with significand width n and k = 2n - 5::

    D = u0 >> 1                  A = (u1 mod 2**(n-1)) << (k-1)
    B = v << 1                   pre-adder: D - A
    y = (u1 * v) mod 32          (5-bit x 5-bit auxiliary multiply)
    C = lsb(u0)*v + 2**k * y - 2**(3n-6) * msb(u1) * v
    P = (D - A)*B + C = u0*v - 2**(2n) * floor(u1*v / 32)

so u0*v is the low 2n bits of P and u1*v = 32 * -(P >> 2n) + y.
"""
from __future__ import annotations

from dataclasses import dataclass, field

A_BITS, B_BITS, C_BITS, D_BITS, P_BITS = 27, 18, 48, 27, 48
PRE_ADDER_MODES = ("bypass", "add", "subtract")
SCHEMES = ("standard", "overpacked", "overpacked_truncated")


class InfeasiblePacking(ValueError):
    """The requested packing does not fit the DSP port widths."""


class RecoveryError(AssertionError):
    """Dual-product recovery failed its internal consistency check."""


def _fits_signed(x: int, bits: int) -> bool:
    return -(1 << (bits - 1)) <= x < (1 << (bits - 1))


def wrap_signed(x: int, bits: int = P_BITS) -> int:
    x &= (1 << bits) - 1
    return x - (1 << bits) if x >> (bits - 1) else x


@dataclass(frozen=True)
class DspPorts:
    a: int
    b: int
    c: int = 0
    d: int = 0
    pre_adder_mode: str = "bypass"

    def __post_init__(self):
        if self.pre_adder_mode not in PRE_ADDER_MODES:
            raise ValueError(f"unknown pre-adder mode {self.pre_adder_mode!r}")
        # C is a full-width register: an unsigned 48-bit pattern is accepted as is
        if 0 <= self.c < (1 << C_BITS):
            object.__setattr__(self, "c", wrap_signed(self.c, C_BITS))
        for name, bits in (("a", A_BITS), ("b", B_BITS), ("c", C_BITS), ("d", D_BITS)):
            if not _fits_signed(getattr(self, name), bits):
                raise ValueError(f"port {name}={getattr(self, name)} exceeds {bits}-bit signed range")

    def pre_adder(self) -> int:
        if self.pre_adder_mode == "bypass":
            return self.a
        if self.pre_adder_mode == "add":
            return self.d + self.a
        return self.d - self.a


def dsp_mac(ports: DspPorts) -> int:
    """P = (D op A) * B + C, wrapped to 48-bit two's complement."""
    return wrap_signed(ports.pre_adder() * ports.b + ports.c)


@dataclass(frozen=True)
class PackedPair:
    scheme: str
    ports: DspPorts
    aux_multiplicands: tuple[int, int]
    truncated_bits: tuple[int, int] = (0, 0)
    truncated_positions: tuple[int, int] = field(default=(0, 0))
    width: int = 11

    @property
    def aux_bits(self) -> int:
        return {"standard": 0, "overpacked": 7, "overpacked_truncated": 5}[self.scheme]


def _check_operand(name: str, x: int, width: int) -> None:
    if not 0 <= x < (1 << width):
        raise ValueError(f"{name}={x} is not a {width}-bit unsigned significand")


def pack_fp16_pair(u0: int, u1: int, v: int, scheme: str = "overpacked_truncated",
                   width: int = 11) -> PackedPair:
    """Lay out u0*v and u1*v on one DSP.

    ``v`` is the shared right-hand significand; it is needed because the
    C-port correction and the auxiliary multiply depend on it.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown packing scheme {scheme!r}")
    n = width
    for name, x in (("u0", u0), ("u1", u1), ("v", v)):
        _check_operand(name, x, n)
    if scheme == "standard":
        a = u1 << (2 * n)
        if not _fits_signed(a, A_BITS) or not _fits_signed(v, B_BITS):
            raise InfeasiblePacking(
                f"standard packing needs {3 * n + 1} bits on the A port, DSP offers {A_BITS}")
        return PackedPair(scheme, DspPorts(a=a, b=v, d=u0, pre_adder_mode="add"), (0, 0), width=n)
    if scheme == "overpacked":
        if n < 4:
            raise InfeasiblePacking("overpacked layout needs at least 4-bit significands")
        s = 2 * n - 7
        lo = (u1 & 127) * (v & 127) & 127
        c = -(lo << s)
        ports = DspPorts(a=u1 << s, b=v, c=c, d=u0, pre_adder_mode="add")
        return PackedPair(scheme, ports, (u1 & 127, v & 127), width=n)

    if n < 6:
        raise InfeasiblePacking("truncated overpacking needs at least 6-bit significands")
    k = 2 * n - 5
    u0_lsb, u1_msb = u0 & 1, u1 >> (n - 1)
    u1_low = u1 & ((1 << (n - 1)) - 1)
    y = (u1_low & 31) * (v & 31) & 31
    c = u0_lsb * v + (y << k) - ((u1_msb * v) << (3 * n - 6))
    ports = DspPorts(a=u1_low << (k - 1), b=v << 1, c=c, d=u0 >> 1, pre_adder_mode="subtract")
    return PackedPair(scheme, ports, (u1_low & 31, v & 31), (u0_lsb, u1_msb), (0, n - 1), width=n)


def recover_dual_products(pair: PackedPair) -> tuple[int, int]:
    """Return (u0*v, u1*v) from one DSP result plus the auxiliary product."""
    n = pair.width
    p = dsp_mac(pair.ports)
    mask = (1 << (2 * n)) - 1
    if pair.scheme == "standard":
        p0, p1 = p & mask, p >> (2 * n)
    elif pair.scheme == "overpacked":
        lo = pair.aux_multiplicands[0] * pair.aux_multiplicands[1] & 127
        p0, p1 = p & mask, ((p >> (2 * n)) << 7) + lo
    else:
        y = pair.aux_multiplicands[0] * pair.aux_multiplicands[1] & 31
        p0, p1 = p & mask, ((-(p >> (2 * n))) << 5) + y
    if p1 < 0 or p1 >> (2 * n):
        raise RecoveryError(f"recovered product {p1} outside the {2 * n}-bit field")
    return p0, p1
