import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fp8emu.minifloat import (
    FP8,
    FP16,
    FP32,
    NEAREST,
    STOCHASTIC,
    EncodedValue,
    FloatFormat,
    RoundingMode,
    UnrepresentableError,
    all_values,
    decode,
    decode_bits,
    encode,
    exact_add,
    exact_mul,
    format_by_name,
    from_bits,
    products_exact,
    quantize,
    to_bits,
    ulp,
    value_table,
)
from fp8emu.kernels import KernelStats
from fp8emu.rng import RngStream


def field_value(bits, exp_bits, man_bits, bias):
    """Independent decoder: sign/exponent/mantissa fields to an exact Fraction."""
    s = bits >> (exp_bits + man_bits)
    e = (bits >> man_bits) & ((1 << exp_bits) - 1)
    m = bits & ((1 << man_bits) - 1)
    if e == 0:
        v = Fraction(m, 1 << man_bits) * Fraction(2) ** (1 - bias)
    else:
        v = (1 + Fraction(m, 1 << man_bits)) * Fraction(2) ** (e - bias)
    return -v if s else v


def finite_patterns(fmt):
    top = fmt.exp_all_ones
    return [b for b in range(2**fmt.total_bits) if (b >> fmt.man_bits) & top != top]


class TestFormat:
    def test_fp8_parameters(self):
        assert (FP8.exp_bits, FP8.man_bits, FP8.bias) == (5, 2, 15)
        assert FP8.max_normal == 57344.0
        assert FP8.min_subnormal == 2.0**-16
        assert FP8.min_normal == 2.0**-14

    def test_fp16_parameters(self):
        assert (FP16.exp_bits, FP16.man_bits, FP16.bias) == (6, 9, 31)
        assert FP16.max_normal == (2 - 2**-9) * 2.0**31
        assert FP16.min_subnormal == 2.0**-39

    def test_fp32_matches_ieee_single(self):
        assert FP32.max_normal == float(np.finfo(np.float32).max)
        assert FP32.min_subnormal == float(np.finfo(np.float32).smallest_subnormal)

    @pytest.mark.parametrize("args", [(1, 2), (5, 0), (20, 20), (12, 3)])
    def test_invalid_formats(self, args):
        with pytest.raises(ValueError):
            FloatFormat(*args)

    def test_format_by_name(self):
        assert format_by_name("FP8") is FP8
        assert format_by_name("e5m2") == FP8
        assert format_by_name("e4m3b7").bias == 7
        with pytest.raises(ValueError):
            format_by_name("fp7")

    def test_products_exact(self):
        assert products_exact(FP8, FP8, FP16)
        assert not products_exact(FP16, FP8, FP16)
        assert not products_exact(FP16, FP16, FP16)


class TestScalarRoute:
    def test_examples(self):
        assert encode(1.0, FP8).bits == 0x3C
        assert encode(1.1, FP8).value == 1.0
        assert encode(1e6, FP8).value == FP8.max_normal
        assert encode(-math.inf, FP8).value == -FP8.max_normal
        assert decode_bits(0x01, FP8) == 2.0**-16
        assert decode_bits(0x3E00, FP16) == 1.0

    def test_nan(self):
        v = encode(math.nan, FP8)
        assert FP8.is_nan_bits(v.bits)
        with pytest.raises(ValueError):
            decode(v)
        with pytest.raises(UnrepresentableError):
            encode(math.nan, FloatFormat(4, 3, special_exponent_reserved=False))

    def test_ties_to_even(self):
        # 1 + 1/8 is halfway between 1 and 1.25 in FP8
        assert encode(1.125, FP8).value == 1.0
        assert encode(1.375, FP8).value == 1.5
        assert encode(-1.125, FP8).value == -1.0

    def test_subnormal_rounding(self):
        tiny = FP8.min_subnormal
        assert encode(0.49 * tiny, FP8).value == 0.0
        assert encode(0.51 * tiny, FP8).value == tiny
        assert encode(1.5 * tiny, FP8).value == 2 * tiny

    def test_overflow_saturates_not_inf(self):
        assert encode(FP16.max_normal * 4, FP16).value == FP16.max_normal
        # the largest value that still rounds down to max normal
        edge = FP8.max_normal + ulp(FP8.max_normal, FP8) / 2
        assert encode(edge, FP8).value == FP8.max_normal

    def test_swamping_both_octaves(self):
        one = encode(1.0, FP16)
        big = encode(1024.0, FP16)
        assert exact_add(big, one, FP16).value == 1024.0
        big = encode(512.0, FP16)
        assert exact_add(big, one, FP16).value == 513.0
        # 2^10 is exactly where a unit addend reaches the half-ulp tie
        assert exact_add(encode(2048.0, FP16), one, FP16).value == 2048.0

    def test_exact_mul(self):
        x = encode(1.75, FP8)
        assert exact_mul(x, x).value == 3.0625

    def test_exact_add_signed_zero(self):
        z = encode(-0.0, FP8)
        assert exact_add(z, z, FP8).bits == FP8.sign_mask
        a = encode(1.5, FP8)
        b = encode(-1.5, FP8)
        assert exact_add(a, b, FP8).bits == 0

    def test_stochastic_needs_rng(self):
        with pytest.raises(ValueError):
            encode(1.1, FP8, STOCHASTIC)

    def test_rounding_mode_parse(self):
        assert RoundingMode.parse("sr") is STOCHASTIC
        assert RoundingMode.parse("nearest") is NEAREST
        with pytest.raises(ValueError):
            RoundingMode.parse("up")


class TestExhaustive:
    @pytest.mark.parametrize("fmt", [FP8, FP16], ids=["fp8", "fp16"])
    def test_round_trip_and_decoder(self, fmt):
        for bits in range(2**fmt.total_bits):
            if fmt.is_nan_bits(bits):
                continue
            v = decode_bits(bits, fmt)
            if math.isinf(v):
                continue
            assert Fraction(v) == field_value(bits, fmt.exp_bits, fmt.man_bits, fmt.bias)
            assert encode(v, fmt).bits == bits

    @pytest.mark.parametrize("fmt", [FP8, FP16], ids=["fp8", "fp16"])
    def test_array_route_round_trip(self, fmt):
        bits = np.array(finite_patterns(fmt))
        vals = from_bits(bits, fmt)
        assert np.array_equal(to_bits(quantize(vals, fmt), fmt), bits)

    def test_fp8_products_exact_in_fp16(self):
        vals = [Fraction(v) for _, v in all_values(FP8) if math.isfinite(v)]
        table = {v for _, v in all_values(FP16)}
        for a in vals:
            for b in vals:
                p = a * b
                assert float(p) in table and Fraction(float(p)) == p

    def test_value_table(self):
        rows = value_table(FP8)
        assert len(rows) == 256
        assert rows[0x3C] == {"bits": "00111100", "sign": 0, "exponent": 15, "mantissa": 0,
                              "value": 1.0}
        assert math.isnan(rows[0x7D]["value"])
        assert rows[0x7C]["value"] == math.inf


def _stochastic_oracle_prob(x, fmt):
    """P(round up) from exact rational arithmetic."""
    x = Fraction(x)
    u = Fraction(ulp(float(x), fmt))
    lo = (x / u).__floor__() * u
    return (x - lo) / u, float(lo), float(lo + u)


class TestStochastic:
    def test_round_up_probability(self):
        # the discarded fraction of an ulp is the probability of rounding up
        x = 1.0 + 0.3 * 0.25
        p, lo, hi = _stochastic_oracle_prob(x, FP8)
        vals = quantize(np.full(200_000, x), FP8, STOCHASTIC, RngStream(3))
        assert set(np.unique(vals)) == {lo, hi}
        frac = float(np.mean(vals == hi))
        n = vals.size
        assert abs(frac - float(p)) < 5 * math.sqrt(float(p * (1 - p)) / n)

    def test_on_grid_values_are_fixed(self):
        vals = np.array([v for _, v in all_values(FP8) if math.isfinite(v)])
        out = quantize(vals, FP8, STOCHASTIC, RngStream(1))
        assert np.array_equal(out, vals)

    def test_deterministic_given_stream(self):
        x = np.linspace(-3, 3, 1001)
        a = quantize(x, FP8, STOCHASTIC, RngStream(9, (1,)))
        b = quantize(x, FP8, STOCHASTIC, RngStream(9, (1,)))
        c = quantize(x, FP8, STOCHASTIC, RngStream(9, (2,)))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_scalar_matches_array_route(self):
        rng = RngStream(5, (4,))
        x = np.random.default_rng(0).normal(size=500) * 10
        arr = quantize(x, FP8, STOCHASTIC, rng)
        for i, v in enumerate(x):
            assert encode(float(v), FP8, STOCHASTIC, rng, i).value == arr[i]

    def test_saturation_stats(self):
        stats = KernelStats()
        quantize(np.array([1e9, -1e9, 1.0, 1.1]), FP8, stats=stats)
        assert stats.saturations == 2
        assert stats.exact_adds == 1
        assert stats.roundings == 1


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(finite)
def test_scalar_and_array_nearest_agree(x):
    for fmt in (FP8, FP16, FP32):
        assert encode(x, fmt).value == quantize(np.array([x]), fmt)[0]


@given(finite)
def test_fp32_nearest_matches_numpy(x):
    if abs(x) > FP32.max_normal * 1.5:
        return
    with np.errstate(over="ignore"):
        ref = float(np.float32(x))
    if math.isinf(ref):
        ref = math.copysign(FP32.max_normal, x)
    assert encode(x, FP32).value == ref


@given(finite, finite)
def test_nearest_is_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    for fmt in (FP8, FP16):
        assert encode(lo, fmt).value <= encode(hi, fmt).value


@given(finite)
def test_nearest_error_bound(x):
    v = encode(x, FP16).value
    if abs(x) <= FP16.max_normal:
        assert abs(v - x) <= ulp(x, FP16) / 2


@given(finite, st.integers(0, 2**32 - 1))
def test_stochastic_brackets_value(x, counter):
    if abs(x) > FP8.max_normal:
        return
    v = encode(x, FP8, STOCHASTIC, RngStream(1), counter).value
    lo = encode(x, FP8).value
    # the result is one of the two neighbours of x
    assert abs(v - x) < ulp(x, FP8) or v == lo


@given(st.integers(0, 255), st.integers(0, 255))
def test_exact_mul_matches_fraction(a, b):
    fa, fb = EncodedValue(a, FP8), EncodedValue(b, FP8)
    if FP8.is_nan_bits(a) or FP8.is_nan_bits(b):
        return
    if math.isinf(decode(fa)) or math.isinf(decode(fb)):
        return
    assert Fraction(exact_mul(fa, fb).value) == Fraction(decode(fa)) * Fraction(decode(fb))
