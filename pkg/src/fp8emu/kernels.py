"""Reduced-precision GEMM, AXPY and conversion kernels.

Tensors carry their values as float64 arrays whose entries are guaranteed to
lie on the grid of ``RPTensor.fmt``; bit patterns are derived on demand.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from fp8emu import _jit
from fp8emu.minifloat import (
    FP8,
    FP16,
    FP32,
    NEAREST,
    STOCHASTIC,
    EncodedValue,
    FloatFormat,
    RoundingMode,
    products_exact,
    quantize,
    to_bits,
)
from fp8emu.rng import RngStream


@dataclass
class KernelStats:
    """Running counts of saturations, exact additions and rounding events."""

    saturations: int = 0
    exact_adds: int = 0
    roundings: int = 0

    def add(self, counts) -> None:
        self.saturations += int(counts[0])
        self.exact_adds += int(counts[1])
        self.roundings += int(counts[2])

    def merge(self, other: "KernelStats") -> None:
        self.add((other.saturations, other.exact_adds, other.roundings))

    def as_dict(self) -> dict:
        return {"saturations": self.saturations, "exact_adds": self.exact_adds,
                "roundings": self.roundings}


@dataclass(frozen=True)
class ChunkSpec:
    length: int = 64

    def __post_init__(self):
        if int(self.length) < 1:
            raise ValueError("chunk length must be >= 1")


@dataclass(frozen=True)
class PrecisionConfig:
    """GEMM precision: operand format, accumulator format, rounding, chunking.

    ``emulate=False`` swaps the emulated accumulator for a float64 matmul
    rounded once into ``fp_acc``; it is only meant for wide (FP32) baselines.
    """

    fp_mult: FloatFormat = FP8
    fp_acc: FloatFormat = FP16
    acc_rounding: RoundingMode = NEAREST
    chunk: Union[ChunkSpec, int] = ChunkSpec(64)
    loss_scale: float = 1000.0
    emulate: bool = True

    def __post_init__(self):
        if isinstance(self.chunk, int):
            object.__setattr__(self, "chunk", ChunkSpec(self.chunk))
        if not self.loss_scale > 0:
            raise ValueError("loss_scale must be positive")
        if self.fp_acc.emax < self.fp_mult.emax or self.fp_acc.man_bits < self.fp_mult.man_bits:
            raise ValueError("accumulator format must cover the multiplier format")

    @property
    def chunk_length(self) -> int:
        return self.chunk.length

    def with_(self, **kw) -> "PrecisionConfig":
        from dataclasses import replace
        return replace(self, **kw)

    @classmethod
    def fp8(cls, chunk: int = 64, loss_scale: float = 1000.0) -> "PrecisionConfig":
        return cls(FP8, FP16, NEAREST, ChunkSpec(chunk), loss_scale)

    @classmethod
    def fp16(cls, chunk: int = 64, loss_scale: float = 1000.0) -> "PrecisionConfig":
        return cls(FP16, FP16, NEAREST, ChunkSpec(chunk), loss_scale)

    @classmethod
    def fp32(cls, chunk: int = 1, loss_scale: float = 1.0, emulate: bool = False) -> "PrecisionConfig":
        return cls(FP32, FP32, NEAREST, ChunkSpec(chunk), loss_scale, emulate)


@dataclass
class RPTensor:
    values: np.ndarray
    fmt: FloatFormat
    tid: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @classmethod
    def encode(cls, x, fmt: FloatFormat, mode: RoundingMode = NEAREST,
               rng: Optional[RngStream] = None, tid: int = 0,
               stats: Optional[KernelStats] = None) -> "RPTensor":
        return cls(quantize(x, fmt, mode, rng, stats=stats), fmt, tid)

    @classmethod
    def from_bits(cls, bits, fmt: FloatFormat, tid: int = 0) -> "RPTensor":
        from fp8emu.minifloat import from_bits
        return cls(from_bits(bits, fmt), fmt, tid)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def bits(self) -> np.ndarray:
        return to_bits(self.values, self.fmt)

    @property
    def T(self) -> "RPTensor":
        return RPTensor(self.values.T, self.fmt, self.tid)

    def reshape(self, *shape) -> "RPTensor":
        return RPTensor(self.values.reshape(*shape), self.fmt, self.tid)

    def is_on_grid(self) -> bool:
        return bool(np.array_equal(quantize(self.values, self.fmt), self.values))

    def __repr__(self) -> str:
        return f"RPTensor(shape={self.shape}, fmt={self.fmt.name}, tid={self.tid})"


def _stream_key(cfg_mode: RoundingMode, rng: Optional[RngStream], out_id: int, step: int) -> np.uint64:
    if cfg_mode is not STOCHASTIC:
        return np.uint64(0)
    if rng is None:
        raise ValueError("stochastic accumulation needs an RngStream")
    return np.uint64(rng.split(out_id, step).key64)


def _check_operand(t: RPTensor, cfg: PrecisionConfig) -> None:
    if t.fmt not in (cfg.fp_mult, cfg.fp_acc):
        raise ValueError(f"operand format {t.fmt.name} is neither {cfg.fp_mult.name} "
                         f"nor {cfg.fp_acc.name}")


def chunked_gemm(A: RPTensor, B: RPTensor, cfg: PrecisionConfig,
                 rng: Optional[RngStream] = None, step: int = 0, out_id: int = 0,
                 stats: Optional[KernelStats] = None) -> RPTensor:
    """C = A @ B with chunk-based accumulation along the inner dimension.

    Products of two ``fp_mult`` operands are exact in ``fp_acc``; any other
    pairing (the FP16 x FP8 first layer) rounds each product to ``fp_acc``
    with nearest-even before it is accumulated.
    """
    a, b = A.values, B.values
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    _check_operand(A, cfg)
    _check_operand(B, cfg)
    acc = cfg.fp_acc
    if not cfg.emulate:
        c = quantize(a @ b, acc, stats=stats)
        return RPTensor(c, acc, out_id)
    M, K = a.shape
    N = b.shape[1]
    out = np.empty((M, N), dtype=np.float64)
    st = np.zeros(3, dtype=np.int64)
    if K == 0:
        out[:] = 0.0
    else:
        round_products = not products_exact(A.fmt, B.fmt, acc)
        key = _stream_key(cfg.acc_rounding, rng, out_id, step)
        _jit.chunked_gemm(np.ascontiguousarray(a), np.ascontiguousarray(b),
                          round_products, acc.man_bits, acc.emin, acc.max_normal,
                          cfg.acc_rounding is STOCHASTIC, cfg.chunk_length, key, out, st)
    if stats is not None:
        stats.add(st)
    return RPTensor(out, acc, out_id)


def chunked_dot(a: RPTensor, b: RPTensor, cfg: PrecisionConfig,
                rng: Optional[RngStream] = None, step: int = 0, out_id: int = 0,
                stats: Optional[KernelStats] = None) -> EncodedValue:
    if a.values.ndim != 1 or b.values.ndim != 1:
        raise ValueError("chunked_dot takes vectors")
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("empty dot product")
    c = chunked_gemm(a.reshape(1, -1), b.reshape(-1, 1), cfg, rng, step, out_id, stats)
    return EncodedValue(int(c.bits[0, 0]), cfg.fp_acc)


def axpy(y: RPTensor, alpha: float, x: RPTensor, mode: RoundingMode,
         rng: Optional[RngStream] = None, stats: Optional[KernelStats] = None) -> RPTensor:
    """y + alpha * x with one rounding into y's format.

    ``alpha`` is first rounded (nearest) to y's format. The product and the
    sum are exact before rounding: the product is exact in float64 and the
    float64 sum error is carried along as a residual.
    """
    if y.shape != x.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {x.shape}")
    fmt = y.fmt
    if fmt.man_bits + x.fmt.man_bits + 2 > 53:
        raise ValueError("product would not be exact in float64")
    a = float(quantize(np.array([alpha]), fmt)[0])
    if a == 0.0:
        return RPTensor(y.values.copy(), fmt, y.tid)
    p = a * x.values
    s = y.values + p
    bb = s - y.values
    err = (y.values - (s - bb)) + (p - bb)
    return RPTensor(quantize(s, fmt, mode, rng, residual=err, stats=stats), fmt, y.tid)


def axpy_sr(y: RPTensor, alpha: float, x: RPTensor, rng: RngStream,
            stats: Optional[KernelStats] = None) -> RPTensor:
    """Stochastically rounded FP16 AXPY; draws are indexed by flat element."""
    return axpy(y, alpha, x, STOCHASTIC, rng, stats)


def convert_tensor(t: RPTensor, fmt: FloatFormat, mode: RoundingMode = NEAREST,
                   rng: Optional[RngStream] = None,
                   stats: Optional[KernelStats] = None) -> RPTensor:
    return RPTensor(quantize(t.values, fmt, mode, rng, stats=stats), fmt, t.tid)


def _two_prod(a: np.ndarray, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Dekker's exact product: a * b == p + e."""
    split = 134217729.0  # 2^27 + 1
    p = a * b
    ca = split * a
    ahi = ca - (ca - a)
    alo = a - ahi
    cb = split * b
    bhi = cb - (cb - b)
    blo = b - bhi
    e = ((ahi * bhi - p) + ahi * blo + alo * bhi) + alo * blo
    return p, e


def scale_loss(err: RPTensor, cfg: PrecisionConfig,
               stats: Optional[KernelStats] = None) -> RPTensor:
    """Multiply the softmax-input error by ``cfg.loss_scale`` (nearest)."""
    p, e = _two_prod(err.values, float(cfg.loss_scale))
    return RPTensor(quantize(p, err.fmt, residual=e, stats=stats), err.fmt, err.tid)


def unscale_grad(g: RPTensor, cfg: PrecisionConfig, out_fmt: FloatFormat = FP16,
                 stats: Optional[KernelStats] = None) -> RPTensor:
    """Divide a gradient by ``cfg.loss_scale``, rounding once (nearest) into out_fmt."""
    s = float(cfg.loss_scale)
    q = g.values / s
    p, pe = _two_prod(q, s)
    rem = (g.values - p) - pe
    return RPTensor(quantize(q, out_fmt, residual=rem / s, stats=stats), out_fmt, g.tid)
