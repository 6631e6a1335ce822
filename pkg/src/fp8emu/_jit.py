"""Compiled inner loops.

Values travel as float64. Every FP8/FP16/FP32 value is exact in float64, an
FP8 x FP8 (or FP16 x FP16) product is exact in float64, and the error of a
float64 sum is recovered exactly with TwoSum. ``round_value`` therefore sees
the exact real ``s + r`` and rounds it once into the target grid.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, types
from numba.extending import intrinsic

ST_EXACT = 0
ST_ROUNDED = 1
ST_SATURATED = 2

_U30 = np.uint64(30)
_U27 = np.uint64(27)
_U31 = np.uint64(31)
_U32 = np.uint64(32)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV32 = 2.0**-32


@njit(cache=True, inline="always")
def mix64(z):
    z = z + _GOLDEN
    z = (z ^ (z >> _U30)) * _M1
    z = (z ^ (z >> _U27)) * _M2
    return z ^ (z >> _U31)


@njit(cache=True, inline="always")
def derive(key, c):
    return mix64(key ^ mix64(c))


@njit(cache=True, inline="always")
def draw(key, c):
    return np.float64(derive(key, c) >> _U32) * _INV32


@intrinsic
def _f2i(typingctx, x):
    sig = types.int64(types.float64)

    def codegen(context, builder, signature, args):
        return builder.bitcast(args[0], context.get_value_type(types.int64))
    return sig, codegen


@intrinsic
def _i2f(typingctx, x):
    sig = types.float64(types.int64)

    def codegen(context, builder, signature, args):
        return builder.bitcast(args[0], context.get_value_type(types.float64))
    return sig, codegen


@njit(cache=True, inline="always")
def round_value(s, r, man_bits, emin, max_val, stochastic, u):
    """Round the exact value ``s + r`` (|r| <= ulp64(s)/2) onto a minifloat grid.

    Returns ``(value, status)``. Stochastic draws compare ``u - frac < r``,
    which is exact because both sides are float64-exact differences; when the
    float64 sum lands on a grid point the residual is below the 2^-32 draw
    resolution for formats with at most 20 mantissa bits.
    """
    a = abs(s)
    if a == 0.0:
        return s, ST_EXACT
    if a > 1.7e308:
        return math.copysign(max_val, s), ST_SATURATED
    e = ((_f2i(a) >> 52) & 0x7FF) - 1023
    if e < emin:
        e = emin
    # ulp and 1/ulp built directly from exponent bits (exact powers of two)
    ulp = _i2f((e - man_bits + 1023) << 52)
    q = a * _i2f((1023 - e + man_bits) << 52)
    fl = math.floor(q)
    frac = q - fl
    if frac == 0.0:
        status = ST_EXACT if r == 0.0 else ST_ROUNDED
    else:
        rr = r * _i2f((1023 - e + man_bits) << 52)
        if s < 0.0:
            rr = -rr
        status = ST_ROUNDED
        if stochastic:
            if u - frac < rr:
                fl += 1.0
        else:
            if frac > 0.5:
                fl += 1.0
            elif frac == 0.5:
                if rr > 0.0:
                    fl += 1.0
                elif rr == 0.0 and (np.int64(fl) & 1) == 1:
                    fl += 1.0
    v = fl * ulp
    if v > max_val:
        v = max_val
        status = ST_SATURATED
    return math.copysign(v, s), status


@njit(cache=True)
def quantize_array(x, r, man_bits, emin, max_val, stochastic, u, out, stats):
    """Elementwise ``round_value`` over flat arrays; ``stats`` = [sat, exact, rounded]."""
    for i in range(x.size):
        v, st = round_value(x[i], r[i], man_bits, emin, max_val, stochastic, u[i])
        out[i] = v
        if st == ST_SATURATED:
            stats[0] += 1
        elif st == ST_EXACT:
            stats[1] += 1
        else:
            stats[2] += 1


@njit(cache=True, inline="always")
def _add_round(acc, p, man_bits, emin, max_val, stochastic, key_o, counter):
    s = acc + p
    bb = s - acc
    err = (acc - (s - bb)) + (p - bb)
    u = 0.0
    if stochastic:
        u = draw(key_o, np.uint64(counter))
    return round_value(s, err, man_bits, emin, max_val, stochastic, u)


@njit(cache=True)
def chunked_gemm(A, B, round_products, man_bits, emin, max_val, stochastic,
                 chunk, key, out, stats):
    """C[i, j] = chunked dot of A[i, :] and B[:, j].

    Per output element: intra-chunk sums run in ascending k and chunk sums
    are accumulated in ascending chunk order; each addition is rounded once
    into the accumulator grid. The j loop is innermost so independent
    outputs overlap in the pipeline; the per-output order is unaffected.
    Draw counters: k for the intra-chunk add of element k, K + c for the
    inter-chunk add of chunk c.
    """
    M, K = A.shape
    N = B.shape[1]
    n_sat = 0
    n_exact = 0
    n_round = 0
    part = np.empty(N)
    keys = np.empty(N, dtype=np.uint64)
    for i in range(M):
        if stochastic:
            for j in range(N):
                keys[j] = derive(key, np.uint64(i * N + j))
        for j in range(N):
            out[i, j] = 0.0
        c = 0
        for k0 in range(0, K, chunk):
            k1 = min(k0 + chunk, K)
            for j in range(N):
                part[j] = 0.0
            for k in range(k0, k1):
                a = A[i, k]
                for j in range(N):
                    p = a * B[k, j]
                    if round_products:
                        p, st = round_value(p, 0.0, man_bits, emin, max_val, False, 0.0)
                        if st == ST_SATURATED:
                            n_sat += 1
                        elif st == ST_ROUNDED:
                            n_round += 1
                    v, st = _add_round(part[j], p, man_bits, emin, max_val, stochastic,
                                       keys[j], k)
                    part[j] = v
                    if st == ST_EXACT:
                        n_exact += 1
                    elif st == ST_ROUNDED:
                        n_round += 1
                    else:
                        n_sat += 1
            for j in range(N):
                v, st = _add_round(out[i, j], part[j], man_bits, emin, max_val, stochastic,
                                   keys[j], K + c)
                out[i, j] = v
                if st == ST_EXACT:
                    n_exact += 1
                elif st == ST_ROUNDED:
                    n_round += 1
                else:
                    n_sat += 1
            c += 1
    stats[0] += n_sat
    stats[1] += n_exact
    stats[2] += n_round
