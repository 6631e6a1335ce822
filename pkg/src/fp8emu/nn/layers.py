"""Layers, precision placement and the three-AXPY SGD update."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from fp8emu.kernels import (
    KernelStats,
    PrecisionConfig,
    RPTensor,
    axpy,
    convert_tensor,
    unscale_grad,
)
from fp8emu.minifloat import FP8, FP16, FP32, NEAREST, STOCHASTIC, FloatFormat, RoundingMode
from fp8emu.nn import functional as F
from fp8emu.rng import RngStream


@dataclass(frozen=True)
class PrecisionPolicy:
    """Where each format is used.

    Interior layers run FP8 x FP8 GEMMs into FP16; the first layer sees FP16
    inputs with FP8 weights; all three GEMMs of the last layer run in FP16;
    the softmax input, errors and the whole weight update are FP16.
    """

    gemm: PrecisionConfig = PrecisionConfig()
    first_layer_input_format: FloatFormat = FP16
    last_layer_gemm_format: FloatFormat = FP16
    softmax_input_format: FloatFormat = FP16
    error_format: FloatFormat = FP16
    weight_grad_format: FloatFormat = FP8
    update_format: FloatFormat = FP16
    update_rounding: RoundingMode = STOCHASTIC
    compute_weight_rounding: RoundingMode = NEAREST
    name: str = "fp8"

    @classmethod
    def fp8_scheme(cls, chunk: int = 64, loss_scale: float = 1000.0) -> "PrecisionPolicy":
        return cls(gemm=PrecisionConfig.fp8(chunk, loss_scale))

    @classmethod
    def fp32_baseline(cls, emulate: bool = False, chunk: int = 1) -> "PrecisionPolicy":
        return cls(PrecisionConfig.fp32(chunk=chunk, emulate=emulate), FP32, FP32, FP32, FP32,
                   FP32, FP32, NEAREST, NEAREST, "fp32")

    @classmethod
    def update_study(cls, mode: RoundingMode, loss_scale: float = 1000.0) -> "PrecisionPolicy":
        """FP32 GEMMs; only the FP16 weight update differs between modes."""
        base = cls.fp32_baseline()
        return replace(base, gemm=base.gemm.with_(loss_scale=loss_scale), update_format=FP16,
                       update_rounding=mode, name=f"fp16-{mode.value}")

    def with_(self, **kw) -> "PrecisionPolicy":
        return replace(self, **kw)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    l2_lambda: float = 1e-4

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")


@dataclass
class LayerState:
    """Master weights, their compute copy, and the momentum buffer."""

    master: RPTensor
    compute: RPTensor
    momentum: RPTensor

    @classmethod
    def create(cls, w: np.ndarray, master_fmt: FloatFormat, compute_fmt: FloatFormat,
               tid: int, rounding: RoundingMode = NEAREST) -> "LayerState":
        master = RPTensor.encode(w, master_fmt, tid=tid)
        compute = convert_tensor(master, compute_fmt, rounding)
        mom = RPTensor(np.zeros_like(master.values), master_fmt, tid)
        return cls(master, compute, mom)


def sgd_step(state: LayerState, dW: RPTensor, opt: OptimizerConfig, mode: RoundingMode,
             rng: Optional[RngStream], step: int, compute_fmt: Optional[FloatFormat] = None,
             compute_rounding: RoundingMode = NEAREST, l2: bool = True,
             stats: Optional[KernelStats] = None) -> LayerState:
    """L2-Reg, Momentum-Acc and Weight-Upd, each one rounded AXPY.

        g = dW + l2_lambda * w
        v = g + momentum * v
        w = w - learning_rate * v

    followed by refreshing the compute copy from the new master weights.
    """
    tid = state.master.tid
    w, v = state.master, state.momentum
    dW = RPTensor(dW.values, dW.fmt, tid)

    def stream(op):
        return rng.split(tid, step, op) if mode is STOCHASTIC else None

    if dW.fmt != w.fmt:
        dW = convert_tensor(dW, w.fmt, stats=stats)
    g = axpy(dW, opt.l2_lambda if l2 else 0.0, w, mode, stream(0), stats)
    v = axpy(g, opt.momentum, v, mode, stream(1), stats)
    w = axpy(w, -opt.learning_rate, v, mode, stream(2), stats)
    fmt = compute_fmt or state.compute.fmt
    compute = convert_tensor(w, fmt, compute_rounding, stats=stats)
    return LayerState(RPTensor(w.values, w.fmt, tid), compute, RPTensor(v.values, v.fmt, tid))


# --- layers -----------------------------------------------------------------

class Layer:
    params = False

    def build(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x: RPTensor, ctx: "StepContext") -> RPTensor:
        raise NotImplementedError

    def backward(self, dy: RPTensor, ctx: "StepContext") -> RPTensor:
        raise NotImplementedError

    def describe(self) -> str:
        return type(self).__name__.lower()


@dataclass
class StepContext:
    policy: PrecisionPolicy
    step: int = 0
    rng: Optional[RngStream] = None
    stats: KernelStats = field(default_factory=KernelStats)
    training: bool = True
    trace: list = field(default_factory=list)


class ReLU(Layer):
    def forward(self, x, ctx):
        self.mask = x.values > 0
        return RPTensor(np.where(self.mask, x.values, 0.0), x.fmt, x.tid)

    def backward(self, dy, ctx):
        return RPTensor(np.where(self.mask, dy.values, 0.0), dy.fmt, dy.tid)


class MaxPool2d(Layer):
    def __init__(self, size: int = 2):
        self.size = size

    def build(self, in_shape):
        c, h, w = in_shape
        if h % self.size or w % self.size:
            raise ValueError("pool size must divide the spatial dimensions")
        return (c, h // self.size, w // self.size)

    def forward(self, x, ctx):
        B, C, H, W = x.shape
        s = self.size
        v = x.values.reshape(B, C, H // s, s, W // s, s).transpose(0, 1, 2, 4, 3, 5)
        v = v.reshape(B, C, H // s, W // s, s * s)
        self.arg = v.argmax(axis=-1)
        self.in_shape = x.shape
        return RPTensor(np.take_along_axis(v, self.arg[..., None], -1)[..., 0], x.fmt, x.tid)

    def backward(self, dy, ctx):
        B, C, H, W = self.in_shape
        s = self.size
        g = np.zeros((B, C, H // s, W // s, s * s))
        np.put_along_axis(g, self.arg[..., None], dy.values[..., None], -1)
        g = g.reshape(B, C, H // s, W // s, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return RPTensor(g, dy.fmt, dy.tid)

    def describe(self):
        return f"pool:{self.size}"


class Flatten(Layer):
    def build(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, ctx):
        self.in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy, ctx):
        return dy.reshape(*self.in_shape)


class _GemmLayer(Layer):
    """Shared placement logic; subclasses supply the three GEMMs."""

    params = True
    is_first = False
    is_last = False
    index = 0

    def formats(self, policy: PrecisionPolicy):
        """(input fmt, weight fmt, error fmt, gemm cfg, weight-grad fmt)."""
        cfg = policy.gemm
        if self.is_last:
            f = policy.last_layer_gemm_format
            cfg = cfg.with_(fp_mult=f) if f != cfg.fp_mult else cfg
            x_fmt = w_fmt = dy_fmt = g_fmt = f
        else:
            x_fmt = w_fmt = dy_fmt = cfg.fp_mult
            g_fmt = policy.weight_grad_format
        if self.is_first:
            x_fmt = policy.first_layer_input_format
            if x_fmt not in (cfg.fp_mult, cfg.fp_acc):
                cfg = cfg.with_(fp_mult=x_fmt)
        return x_fmt, w_fmt, dy_fmt, cfg, g_fmt

    @property
    def tid(self) -> int:
        return 16 * (self.index + 1)

    def init_state(self, policy: PrecisionPolicy, gen: np.random.Generator) -> None:
        w = gen.normal(0.0, np.sqrt(2.0 / self.fan_in), size=self.w_shape)
        _, w_fmt, _, _, _ = self.formats(policy)
        self.state = LayerState.create(w, policy.update_format, w_fmt, self.tid,
                                       policy.compute_weight_rounding)
        self.bias = LayerState.create(np.zeros(self.w_shape[0]), policy.update_format,
                                      policy.update_format, self.tid + 1)

    def forward(self, x, ctx):
        x_fmt, w_fmt, _, cfg, _ = self.formats(ctx.policy)
        if x.fmt != x_fmt:
            x = convert_tensor(x, x_fmt, stats=ctx.stats)
        self.x = x
        W = self.state.compute
        if W.fmt != w_fmt:
            W = convert_tensor(W, w_fmt, ctx.policy.compute_weight_rounding, stats=ctx.stats)
        self.W = W
        y = self._gemm_forward(x, W, cfg, ctx)
        b = self.bias.master
        if b.fmt != y.fmt:
            b = convert_tensor(b, y.fmt, stats=ctx.stats)
        y = F.add_bias(y, b, axis=1, stats=ctx.stats)
        ctx.trace.append((self.index, "forward", x.fmt.name, W.fmt.name, cfg.fp_acc.name))
        return y

    def backward(self, dy, ctx):
        _, _, dy_fmt, cfg, g_fmt = self.formats(ctx.policy)
        if dy.fmt != dy_fmt:
            dy = convert_tensor(dy, dy_fmt, stats=ctx.stats)
        if getattr(self, "capture", False):
            self.captured_dy = dy
        dW = self._gemm_gradient(dy, self.x, cfg, ctx)
        ctx.trace.append((self.index, "gradient", dy.fmt.name, self.x.fmt.name, cfg.fp_acc.name))
        self.dW = convert_tensor(dW, g_fmt, stats=ctx.stats)
        self.db = F.bias_gradient(dy, 1, cfg, ctx.rng, ctx.step, self.tid + 5, ctx.stats)
        if self.is_first:
            return None
        dx = self._gemm_backward(dy, self.W, cfg, ctx)
        ctx.trace.append((self.index, "backward", dy.fmt.name, self.W.fmt.name, cfg.fp_acc.name))
        return dx

    def update(self, opt: OptimizerConfig, ctx: StepContext) -> None:
        p = ctx.policy
        cfg = p.gemm
        gw = unscale_grad(self.dW, cfg, p.update_format, stats=ctx.stats)
        gb = unscale_grad(self.db, cfg, p.update_format, stats=ctx.stats)
        _, w_fmt, _, _, _ = self.formats(p)
        self.state = sgd_step(self.state, gw, opt, p.update_rounding, ctx.rng, ctx.step,
                              w_fmt, p.compute_weight_rounding, stats=ctx.stats)
        self.bias = sgd_step(self.bias, gb, opt, p.update_rounding, ctx.rng, ctx.step,
                             p.update_format, l2=False, stats=ctx.stats)
        ctx.trace.append((self.index, "update", gw.fmt.name, self.state.master.fmt.name,
                          p.update_rounding.value))

    def _gemm_forward(self, x, W, cfg, ctx):
        raise NotImplementedError

    def _gemm_backward(self, dy, W, cfg, ctx):
        raise NotImplementedError

    def _gemm_gradient(self, dy, x, cfg, ctx):
        raise NotImplementedError


class Dense(_GemmLayer):
    def __init__(self, units: int):
        self.units = units

    def build(self, in_shape):
        if len(in_shape) != 1:
            raise ValueError("Dense expects flat input; add a flatten layer")
        self.fan_in = in_shape[0]
        self.w_shape = (self.units, in_shape[0])
        return (self.units,)

    def _gemm_forward(self, x, W, cfg, ctx):
        return F.fc_forward(x, W, cfg, ctx.rng, ctx.step, self.tid + 2, ctx.stats)

    def _gemm_backward(self, dy, W, cfg, ctx):
        return F.fc_backward(dy, W, cfg, ctx.rng, ctx.step, self.tid + 3, ctx.stats)

    def _gemm_gradient(self, dy, x, cfg, ctx):
        return F.fc_gradient(dy, x, cfg, ctx.rng, ctx.step, self.tid + 4, ctx.stats)

    def describe(self):
        return f"dense:{self.units}"


class Conv2d(_GemmLayer):
    """Stride-1 convolution with 'same' zero padding for odd kernels."""

    def __init__(self, channels: int, kernel: int = 3):
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.channels = channels
        self.kernel = kernel
        self.pad = kernel // 2

    def build(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError("Conv2d expects (channels, height, width) input")
        c, h, w = in_shape
        self.fan_in = c * self.kernel**2
        self.w_shape = (self.channels, c, self.kernel, self.kernel)
        return (self.channels, h, w)

    def _gemm_forward(self, x, W, cfg, ctx):
        return F.conv_forward(x, W, cfg, self.pad, ctx.rng, ctx.step, self.tid + 2, ctx.stats)

    def _gemm_backward(self, dy, W, cfg, ctx):
        return F.conv_backward(dy, W, cfg, self.pad, ctx.rng, ctx.step, self.tid + 3, ctx.stats)

    def _gemm_gradient(self, dy, x, cfg, ctx):
        return F.conv_gradient(dy, x, cfg, self.pad, self.kernel, ctx.rng, ctx.step,
                               self.tid + 4, ctx.stats)

    def describe(self):
        return f"conv:{self.channels}:{self.kernel}"
