"""Bit-exact emulation of small floating-point formats.

Two independent routes are provided:

* a scalar route (``encode``, ``decode``, ``exact_add``, ``exact_mul``) that
  works on Python integers: operands are split into integer significands
  and exponents, aligned, summed or multiplied exactly, then rounded once;
* an array route (``quantize``, ``to_bits``, ``from_bits``) that works on
  float64 arrays through the compiled kernels in ``_jit``.

The test suite checks that both routes agree bit for bit.

Bit layout is sign | exponent | mantissa, most significant bit first. The
all-ones exponent is reserved for Inf/NaN when ``special_exponent_reserved``
is set; overflow saturates to the largest finite value instead of
producing Inf.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from fp8emu import _jit
from fp8emu.rng import RngStream


class RoundingMode(enum.Enum):
    NEAREST_EVEN = "nearest"
    STOCHASTIC = "stochastic"

    @classmethod
    def parse(cls, text: "str | RoundingMode") -> "RoundingMode":
        if isinstance(text, RoundingMode):
            return text
        key = text.strip().lower()
        aliases = {"nearest": cls.NEAREST_EVEN, "ne": cls.NEAREST_EVEN, "nr": cls.NEAREST_EVEN,
                   "rne": cls.NEAREST_EVEN, "nearest_even": cls.NEAREST_EVEN,
                   "stochastic": cls.STOCHASTIC, "sr": cls.STOCHASTIC}
        if key not in aliases:
            raise ValueError(f"unknown rounding mode {text!r}")
        return aliases[key]


NEAREST = RoundingMode.NEAREST_EVEN
STOCHASTIC = RoundingMode.STOCHASTIC


class UnrepresentableError(ValueError):
    pass


@dataclass(frozen=True)
class FloatFormat:
    """(1, exp_bits, man_bits) minifloat with an explicit exponent bias."""

    exp_bits: int
    man_bits: int
    bias: Optional[int] = None
    special_exponent_reserved: bool = True
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.exp_bits < 2 or self.man_bits < 1:
            raise ValueError("need exp_bits >= 2 and man_bits >= 1")
        if 1 + self.exp_bits + self.man_bits > 32:
            raise ValueError("formats wider than 32 bits are not supported")
        if self.exp_bits > 11:
            # keeps every value exact in float64
            raise ValueError("exp_bits > 11 exceeds the float64 carrier range")
        if self.bias is None:
            object.__setattr__(self, "bias", 2 ** (self.exp_bits - 1) - 1)
        if not self.name:
            object.__setattr__(self, "name", f"e{self.exp_bits}m{self.man_bits}")

    sign_bits = 1

    @property
    def total_bits(self) -> int:
        return 1 + self.exp_bits + self.man_bits

    @property
    def emin(self) -> int:
        return 1 - self.bias

    @property
    def emax(self) -> int:
        top = 2**self.exp_bits - 1
        return (top - 1 if self.special_exponent_reserved else top) - self.bias

    @cached_property
    def max_normal(self) -> float:
        return math.ldexp(2.0 - 2.0**-self.man_bits, self.emax)

    @cached_property
    def min_normal(self) -> float:
        return math.ldexp(1.0, self.emin)

    @cached_property
    def min_subnormal(self) -> float:
        return math.ldexp(1.0, self.emin - self.man_bits)

    @property
    def sign_mask(self) -> int:
        return 1 << (self.exp_bits + self.man_bits)

    @property
    def exp_all_ones(self) -> int:
        return 2**self.exp_bits - 1

    @property
    def nan_bits(self) -> int:
        return (self.exp_all_ones << self.man_bits) | (1 << (self.man_bits - 1))

    def is_nan_bits(self, bits: int) -> bool:
        e = (bits >> self.man_bits) & self.exp_all_ones
        return (self.special_exponent_reserved and e == self.exp_all_ones
                and bits & ((1 << self.man_bits) - 1) != 0)

    def jit_params(self) -> tuple[int, int, float]:
        return self.man_bits, self.emin, self.max_normal

    def __str__(self) -> str:
        return self.name


FP8 = FloatFormat(5, 2, name="fp8")
FP16 = FloatFormat(6, 9, name="fp16")
FP32 = FloatFormat(8, 23, name="fp32")

PRESETS = {"fp8": FP8, "fp16": FP16, "fp32": FP32}


def format_by_name(name: str) -> FloatFormat:
    """Look up a preset, or parse ``e<E>m<M>[b<bias>]``."""
    key = name.strip().lower()
    if key in PRESETS:
        return PRESETS[key]
    import re
    m = re.fullmatch(r"e(\d+)m(\d+)(?:b(-?\d+))?", key)
    if not m:
        raise ValueError(f"unknown format {name!r}")
    bias = int(m.group(3)) if m.group(3) is not None else None
    return FloatFormat(int(m.group(1)), int(m.group(2)), bias)


def products_exact(fa: FloatFormat, fb: FloatFormat, acc: FloatFormat) -> bool:
    """True if every finite fa x fb product is representable in ``acc``."""
    if fa.man_bits + fb.man_bits + 1 > acc.man_bits:
        return False
    lo = fa.min_subnormal * fb.min_subnormal
    hi = fa.max_normal * fb.max_normal
    # products are multiples of lo; acc must resolve that grid and hold hi
    return lo >= acc.min_subnormal and hi <= acc.max_normal


@dataclass(frozen=True)
class EncodedValue:
    bits: int
    fmt: FloatFormat

    @property
    def value(self) -> float:
        return decode(self)

    def __repr__(self) -> str:
        width = (self.fmt.total_bits + 3) // 4
        return f"EncodedValue(0x{self.bits:0{width}X}, {self.fmt.name})"


# --- scalar route -----------------------------------------------------------

def _split(v: EncodedValue) -> tuple[int, int, int]:
    """(sign, integer significand, exponent) with value = (-1)^s * n * 2^k."""
    f = v.fmt
    if f.is_nan_bits(v.bits):
        raise ValueError("not a number")
    s = v.bits >> (f.exp_bits + f.man_bits)
    e = (v.bits >> f.man_bits) & f.exp_all_ones
    m = v.bits & ((1 << f.man_bits) - 1)
    if f.special_exponent_reserved and e == f.exp_all_ones:
        raise ValueError("infinite operand")
    if e == 0:
        return s, m, f.emin - f.man_bits
    return s, m | (1 << f.man_bits), e - f.bias - f.man_bits


def _draw32(rng: Optional[RngStream], counter: int) -> int:
    if rng is None:
        raise ValueError("stochastic rounding needs an RngStream")
    return rng.bits32_at(counter)


def round_dyadic(sign: int, n: int, k: int, fmt: FloatFormat,
                 mode: RoundingMode = NEAREST, u32: int = 0) -> tuple[int, int]:
    """Round (-1)^sign * n * 2^k into ``fmt``; returns (bits, status).

    ``u32`` is a 32-bit uniform draw; stochastic rounding goes up iff
    u32 / 2^32 < (discarded fraction of an ulp).
    """
    M = fmt.man_bits
    if n == 0:
        return sign * fmt.sign_mask, _jit.ST_EXACT
    e = max(n.bit_length() - 1 + k, fmt.emin)
    shift = (e - M) - k
    status = _jit.ST_EXACT
    if shift <= 0:
        q = n << -shift
    else:
        q, rem = n >> shift, n & ((1 << shift) - 1)
        if rem:
            status = _jit.ST_ROUNDED
            if mode is STOCHASTIC:
                if (u32 << shift) < (rem << 32):
                    q += 1
            else:
                half = 1 << (shift - 1)
                if rem > half or (rem == half and q & 1):
                    q += 1
    if q >> (M + 1):
        q >>= 1
        e += 1
    if e > fmt.emax:
        e, q, status = fmt.emax, (1 << (M + 1)) - 1, _jit.ST_SATURATED
    if q >> M:
        bits = ((e + fmt.bias) << M) | (q - (1 << M))
    else:
        bits = q
    return bits | (sign * fmt.sign_mask), status


def encode(x: float, fmt: FloatFormat, mode: RoundingMode = NEAREST,
           rng: Optional[RngStream] = None, counter: int = 0) -> EncodedValue:
    """Encode a float64 value; finite overflow and +-inf saturate to max normal."""
    if math.isnan(x):
        if not fmt.special_exponent_reserved:
            raise UnrepresentableError("unrepresentable: NaN in a format without specials")
        return EncodedValue(fmt.nan_bits, fmt)
    sign = 1 if math.copysign(1.0, x) < 0 else 0
    if math.isinf(x):
        bits, _ = round_dyadic(sign, 1, fmt.emax + 1, fmt)
        return EncodedValue(bits, fmt)
    num, den = abs(x).as_integer_ratio()
    u32 = _draw32(rng, counter) if mode is STOCHASTIC else 0
    bits, _ = round_dyadic(sign, num, -(den.bit_length() - 1), fmt, mode, u32)
    return EncodedValue(bits, fmt)


def decode_bits(bits: int, fmt: FloatFormat) -> float:
    e = (bits >> fmt.man_bits) & fmt.exp_all_ones
    m = bits & ((1 << fmt.man_bits) - 1)
    neg = bits & fmt.sign_mask
    if fmt.special_exponent_reserved and e == fmt.exp_all_ones:
        if m:
            raise ValueError("not a number")
        return -math.inf if neg else math.inf
    if e == 0:
        v = math.ldexp(m, fmt.emin - fmt.man_bits)
    else:
        v = math.ldexp(m | (1 << fmt.man_bits), e - fmt.bias - fmt.man_bits)
    return -v if neg else v


def decode(v: EncodedValue) -> float:
    return decode_bits(v.bits, v.fmt)


def exact_add(a: EncodedValue, b: EncodedValue, out_fmt: FloatFormat,
              mode: RoundingMode = NEAREST, rng: Optional[RngStream] = None,
              counter: int = 0) -> EncodedValue:
    """a + b computed on aligned integer significands, rounded once into out_fmt."""
    sa, na, ka = _split(a)
    sb, nb, kb = _split(b)
    k = min(ka, kb)
    ia = (na << (ka - k)) * (-1 if sa else 1)
    ib = (nb << (kb - k)) * (-1 if sb else 1)
    total = ia + ib
    if total == 0:
        # IEEE: exact zero sum is +0 unless both operands are -0
        sign = 1 if (sa and sb) else 0
        return EncodedValue(sign * out_fmt.sign_mask, out_fmt)
    u32 = _draw32(rng, counter) if mode is STOCHASTIC else 0
    bits, _ = round_dyadic(1 if total < 0 else 0, abs(total), k, out_fmt, mode, u32)
    return EncodedValue(bits, out_fmt)


def exact_mul(a: EncodedValue, b: EncodedValue, out_fmt: FloatFormat = FP16,
              mode: RoundingMode = NEAREST, rng: Optional[RngStream] = None,
              counter: int = 0) -> EncodedValue:
    """a * b on integer significands. FP8 x FP8 into FP16 never rounds."""
    sa, na, ka = _split(a)
    sb, nb, kb = _split(b)
    u32 = _draw32(rng, counter) if mode is STOCHASTIC else 0
    bits, _ = round_dyadic(sa ^ sb, na * nb, ka + kb, out_fmt, mode, u32)
    return EncodedValue(bits, out_fmt)


def all_values(fmt: FloatFormat) -> list[tuple[int, float]]:
    """Every non-NaN (bits, value) pair of a format (small formats only)."""
    out = []
    for bits in range(2**fmt.total_bits):
        if not fmt.is_nan_bits(bits):
            out.append((bits, decode_bits(bits, fmt)))
    return out


def value_table(fmt: FloatFormat) -> list[dict]:
    """Rows of the dump-format table: bits, sign, exponent, mantissa, value."""
    rows = []
    for bits in range(2**fmt.total_bits):
        e = (bits >> fmt.man_bits) & fmt.exp_all_ones
        m = bits & ((1 << fmt.man_bits) - 1)
        s = bits >> (fmt.exp_bits + fmt.man_bits)
        value = math.nan if fmt.is_nan_bits(bits) else decode_bits(bits, fmt)
        rows.append({"bits": format(bits, f"0{fmt.total_bits}b"), "sign": s,
                     "exponent": e, "mantissa": m, "value": value})
    return rows


# --- array route --------------------------------------------------------------

def quantize(x, fmt: FloatFormat, mode: RoundingMode = NEAREST,
             rng: Optional[RngStream] = None, residual=None, uniforms=None,
             stats=None) -> np.ndarray:
    """Round float64 values (plus an optional exact residual) onto ``fmt``.

    ``x + residual`` is the exact value being rounded. Stochastic mode takes
    draws from ``uniforms`` if given, else ``rng.uniform`` over the flat
    element index.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    r = (np.zeros_like(flat) if residual is None
         else np.ascontiguousarray(residual, dtype=np.float64).reshape(-1))
    stochastic = mode is STOCHASTIC
    if stochastic:
        if uniforms is None:
            if rng is None:
                raise ValueError("stochastic rounding needs an RngStream")
            uniforms = rng.uniform_n(flat.size)
        u = np.ascontiguousarray(uniforms, dtype=np.float64).reshape(-1)
    else:
        u = np.zeros_like(flat)
    out = np.empty_like(flat)
    st = np.zeros(3, dtype=np.int64)
    _jit.quantize_array(flat, r, fmt.man_bits, fmt.emin, fmt.max_normal,
                        stochastic, u, out, st)
    if stats is not None:
        stats.add(st)
    return out.reshape(x.shape)


def to_bits(values, fmt: FloatFormat) -> np.ndarray:
    """Bit patterns of on-grid float64 values (NaN maps to the canonical NaN)."""
    v = np.asarray(values, dtype=np.float64)
    sign = np.signbit(v).astype(np.int64)
    a = np.abs(v)
    nan = np.isnan(a)
    inf = np.isinf(a)
    a = np.where(nan | inf, 0.0, a)
    _, k = np.frexp(a)
    e = np.maximum(k - 1, fmt.emin)
    normal = a >= fmt.min_normal
    q = np.ldexp(a, (fmt.man_bits - e).astype(np.int64))
    if not np.all(q == np.floor(q)):
        raise ValueError(f"values not representable in {fmt.name}")
    q = q.astype(np.int64)
    exp_field = np.where(normal, e + fmt.bias, 0)
    man = np.where(normal, q - (1 << fmt.man_bits), q)
    bits = (sign << (fmt.exp_bits + fmt.man_bits)) | (exp_field << fmt.man_bits) | man
    top = fmt.exp_all_ones << fmt.man_bits
    bits = np.where(inf, (sign << (fmt.exp_bits + fmt.man_bits)) | top, bits)
    bits = np.where(nan, fmt.nan_bits, bits)
    return bits.astype(np.uint32)


def from_bits(bits, fmt: FloatFormat) -> np.ndarray:
    b = np.asarray(bits, dtype=np.int64)
    e = (b >> fmt.man_bits) & fmt.exp_all_ones
    m = b & ((1 << fmt.man_bits) - 1)
    neg = (b >> (fmt.exp_bits + fmt.man_bits)) & 1
    sig = np.where(e == 0, m, m | (1 << fmt.man_bits)).astype(np.float64)
    exp = np.where(e == 0, fmt.emin, e - fmt.bias) - fmt.man_bits
    v = np.ldexp(sig, exp.astype(np.int64))
    if fmt.special_exponent_reserved:
        top = e == fmt.exp_all_ones
        v = np.where(top & (m == 0), np.inf, v)
        v = np.where(top & (m != 0), np.nan, v)
    return np.where(neg == 1, -v, v)


def ulp(x: float, fmt: FloatFormat) -> float:
    """Spacing of the grid at |x| (the spacing just above |x| for grid points)."""
    a = abs(x)
    e = fmt.emin if a < fmt.min_normal else max(math.frexp(a)[1] - 1, fmt.emin)
    return math.ldexp(1.0, e - fmt.man_bits)
