"""Bit-faithful emulation of FP8/FP16 training arithmetic.

Custom minifloat formats with nearest-even and stochastic rounding, chunked
GEMM accumulation, a small network trained under a mixed-precision policy,
and scripted numerical studies.
"""

__version__ = "0.1.0"

from fp8emu.minifloat import (
    FP8,
    FP16,
    FP32,
    NEAREST,
    STOCHASTIC,
    EncodedValue,
    FloatFormat,
    RoundingMode,
    decode,
    encode,
    quantize,
)
from fp8emu.kernels import (
    ChunkSpec,
    KernelStats,
    PrecisionConfig,
    RPTensor,
    axpy,
    chunked_dot,
    chunked_gemm,
    convert_tensor,
)
from fp8emu.rng import RngStream
