"""Numerical studies: accumulation drift, chunk-size sweep, update rounding.

Each study returns a list of row dicts with a fixed column order (see
``*_COLUMNS``) and carries a wide-precision reference computed with
``math.fsum`` over the decoded operands, which never touches the emulated
accumulator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from fp8emu.kernels import ChunkSpec, PrecisionConfig, RPTensor, chunked_gemm, scale_loss
from fp8emu.minifloat import FP8, FP16, NEAREST, STOCHASTIC, FloatFormat, RoundingMode, quantize
from fp8emu.nn.layers import Conv2d, OptimizerConfig, PrecisionPolicy, StepContext
from fp8emu.nn.model import Network
from fp8emu.nn.train import Dataset, DivergenceError, train
from fp8emu.nn import functional as F
from fp8emu.rng import RngStream

DRIFT_COLUMNS = ["n", "chunk", "mode", "trials", "accumulated", "reference", "rel_error"]
SWEEP_COLUMNS = ["operand", "chunk", "k", "l2_distance"]
ROUND_COLUMNS = ["mode", "seed", "epochs", "test_error", "diverged"]


@dataclass(frozen=True)
class SweepSpec:
    mean: float = 1.0
    stdev: float = 1.0
    lengths: tuple[int, ...] = (1024, 4096, 16384, 65536, 262144, 1048576)
    chunk_sizes: tuple[int, ...] = (1, 8, 32, 64)
    modes: tuple[RoundingMode, ...] = (NEAREST, STOCHASTIC)
    trials: int = 16
    seed: int = 0
    operand_format: FloatFormat = FP16
    acc_format: FloatFormat = FP16

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.lengths or not self.chunk_sizes:
            raise ValueError("lengths and chunk_sizes must be non-empty")
        if min(self.lengths) < 1:
            raise ValueError("lengths must be >= 1")
        for c in self.chunk_sizes:
            ChunkSpec(c)


def draw_addends(spec: SweepSpec, n: int, trial: int) -> np.ndarray:
    """Uniform addends with the requested mean/stdev, rounded into the operand format."""
    half = math.sqrt(3.0) * spec.stdev
    u = RngStream(spec.seed, (0xD21F7, n, trial)).uniform_n(n)
    return quantize(spec.mean - half + 2.0 * half * u, spec.operand_format)


def accumulation_drift(spec: SweepSpec) -> list[dict]:
    rows = []
    for n in spec.lengths:
        # one column per trial: every trial is an independent output of one GEMM
        V = np.stack([draw_addends(spec, n, t) for t in range(spec.trials)], axis=1)
        refs = np.array([math.fsum(V[:, t]) for t in range(spec.trials)])
        ones = RPTensor(np.ones((1, n)), spec.operand_format)
        vt = RPTensor(V, spec.operand_format)
        for cl in spec.chunk_sizes:
            for mode in spec.modes:
                cfg = PrecisionConfig(spec.operand_format, spec.acc_format, mode, ChunkSpec(cl), 1.0)
                rng = RngStream(spec.seed, (0xACC, n, cl))
                acc = chunked_gemm(ones, vt, cfg, rng).values[0]
                rel = np.abs(acc - refs) / np.maximum(np.abs(refs), np.finfo(float).tiny)
                rows.append({"n": n, "chunk": cl, "mode": mode.value, "trials": spec.trials,
                             "accumulated": float(acc.mean()), "reference": float(refs.mean()),
                             "rel_error": float(rel.mean())})
    return rows


# --- chunk sweep ----------------------------------------------------------------

def wide_gemm(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Correctly rounded float64 GEMM via ``math.fsum`` of exact products."""
    M, K = A.shape
    N = B.shape[1]
    out = np.empty((M, N))
    for i in range(M):
        prods = A[i][:, None] * B  # exact for FP8/FP16 operands
        for j in range(N):
            out[i, j] = math.fsum(prods[:, j])
    return out


def normalized_l2(c: np.ndarray, ref: np.ndarray) -> float:
    den = float(np.linalg.norm(ref))
    return float(np.linalg.norm(c - ref)) / den if den > 0 else float(np.linalg.norm(c))


def chunk_sweep(operands: Sequence[tuple[str, RPTensor, RPTensor]], chunk_sizes: Iterable[int],
                cfg: PrecisionConfig = PrecisionConfig.fp8()) -> list[dict]:
    """Normalized L2 distance of the chunked GEMM to the wide GEMM, per chunk length.

    ``operands`` holds (name, A, B) triples; a chunk size of 0 stands for
    K (a single chunk).
    """
    rows = []
    for name, A, B in operands:
        if A.shape[1] != B.shape[0]:
            raise ValueError(f"{name}: shape mismatch {A.shape} @ {B.shape}")
        ref = wide_gemm(A.values, B.values)
        K = A.shape[1]
        for cl in chunk_sizes:
            length = K if cl in (0, None) else int(cl)
            c = chunked_gemm(A, B, cfg.with_(chunk=ChunkSpec(length)))
            rows.append({"operand": name, "chunk": length, "k": K,
                         "l2_distance": normalized_l2(c.values, ref)})
    return rows


def capture_gradient_operands(model: Network, x: np.ndarray, y: np.ndarray) -> list[tuple[str, RPTensor, RPTensor]]:
    """Run one forward/backward pass (no update) and return, for every conv
    layer, the lowered Gradient-GEMM operands (errors, activations^T)."""
    ctx = StepContext(model.policy)
    logits = model.forward(x, ctx)
    _, err = F.softmax_xent(logits, y, model.policy.error_format)
    err = scale_loss(err, model.policy.gemm)
    captured = []
    for layer in model.gemm_layers:
        if isinstance(layer, Conv2d):
            layer.capture = True
    model.backward(err, ctx)
    for layer in model.gemm_layers:
        if isinstance(layer, Conv2d) and getattr(layer, "captured_dy", None) is not None:
            dy, xin = layer.captured_dy, layer.x
            B, Co, H, W = dy.shape
            dym = dy.values.transpose(1, 0, 2, 3).reshape(Co, B * H * W)
            cols = F.im2col(xin.values, layer.kernel, layer.pad).T
            captured.append((f"conv{layer.index}", RPTensor(dym, dy.fmt),
                             RPTensor(np.ascontiguousarray(cols), xin.fmt)))
            layer.capture = False
            layer.captured_dy = None
    return captured


def captured_chunk_sweep(model: Network, x: np.ndarray, y: np.ndarray, chunk_sizes: Iterable[int],
                         batch_size: int = 64, batches: int = 4,
                         cfg: Optional[PrecisionConfig] = None) -> list[dict]:
    """Chunk sweep on operands captured from ``batches`` consecutive
    minibatches; distances are averaged over batches per (operand, chunk)."""
    if batches < 1 or batch_size * batches > len(y):
        raise ValueError(f"need {batches} batches of {batch_size}, have {len(y)} samples")
    cfg = cfg or model.policy.gemm
    chunk_sizes = tuple(chunk_sizes)
    sums: dict[tuple[str, int], list] = {}
    for b in range(batches):
        sl = slice(b * batch_size, (b + 1) * batch_size)
        for r in chunk_sweep(capture_gradient_operands(model, x[sl], y[sl]), chunk_sizes, cfg):
            key = (r["operand"], r["chunk"])
            if key not in sums:
                sums[key] = [r["k"], 0.0]
            sums[key][1] += r["l2_distance"] / batches
    return [{"operand": op, "chunk": c, "k": k, "l2_distance": d}
            for (op, c), (k, d) in sums.items()]


def synthetic_gradient_operands(rows: int = 16, inner: int = 4096, cols: int = 72, seed: int = 0,
                                sigma: float = 1.0, fmt: FloatFormat = FP8) -> list[tuple[str, RPTensor, RPTensor]]:
    """Heavy-tailed stand-ins for Gradient-GEMM operands: signed log-normal
    errors against non-negative log-normal activations, both in ``fmt``."""
    gen = RngStream(seed, (0x5F7,)).generator()
    out = []
    for n in range(2):
        err = gen.lognormal(0.0, sigma, (rows, inner)) * gen.choice([-1.0, 1.0], (rows, inner))
        act = gen.lognormal(0.0, sigma, (inner, cols))
        out.append((f"synthetic{n}", RPTensor.encode(err, fmt), RPTensor.encode(act, fmt)))
    return out


def sweep_minimum(rows: list[dict]) -> dict[str, int]:
    """Chunk length with the smallest distance, per operand."""
    best: dict[str, tuple[float, int]] = {}
    for r in rows:
        cur = best.get(r["operand"])
        if cur is None or r["l2_distance"] < cur[0]:
            best[r["operand"]] = (r["l2_distance"], r["chunk"])
    return {k: v[1] for k, v in best.items()}


# --- update rounding study ----------------------------------------------------

@dataclass
class RoundStudyResult:
    rows: list[dict]

    def mean_error(self, mode: str) -> float:
        vals = [r["test_error"] for r in self.rows if r["mode"] == mode]
        return float(np.mean(vals))

    def errors(self, mode: str) -> list[float]:
        return [r["test_error"] for r in self.rows if r["mode"] == mode]


def rounding_update_study(spec: str, data: Dataset, opt: OptimizerConfig, seeds: Sequence[int],
                          epochs: int, batch_size: int = 64,
                          modes: Sequence[str] = ("fp32", "nearest", "stochastic"),
                          loss_scale: float = 1000.0) -> RoundStudyResult:
    """Train the same model with FP32 updates and with FP16 nearest/stochastic
    updates; GEMMs stay FP32 so only the update path differs."""
    policies = {"fp32": PrecisionPolicy.fp32_baseline(),
                "nearest": PrecisionPolicy.update_study(NEAREST, loss_scale),
                "stochastic": PrecisionPolicy.update_study(STOCHASTIC, loss_scale)}
    rows = []
    for seed in seeds:
        for mode in modes:
            model = Network.from_spec(spec, data.input_shape, data.classes, policies[mode], seed)
            try:
                res = train(model, data, opt, epochs, seed, batch_size)
                err, diverged = res.final_test_error, False
            except DivergenceError as e:
                err, diverged = e.history[-1].test_error, True
            rows.append({"mode": mode, "seed": seed, "epochs": epochs, "test_error": err,
                         "diverged": diverged})
    return RoundStudyResult(rows)
