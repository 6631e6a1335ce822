from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from fp8emu.kernels import KernelStats, RPTensor, convert_tensor, scale_loss
from fp8emu.nn import functional as F
from fp8emu.nn.layers import (
    Conv2d,
    Dense,
    Flatten,
    Layer,
    MaxPool2d,
    OptimizerConfig,
    PrecisionPolicy,
    ReLU,
    StepContext,
    _GemmLayer,
)
from fp8emu.rng import RngStream

ARCHITECTURES = {
    "mlp": "flatten, dense:256, relu, dense:{classes}",
    "cnn": "conv:8:3, relu, conv:16:3, relu, pool:2, flatten, dense:{classes}",
    "linear": "flatten, dense:{classes}",
}


def parse_layers(spec: str, classes: int = 10) -> list[Layer]:
    """Parse ``"conv:8:3, relu, pool:2, flatten, dense:10"`` (or an alias)."""
    spec = ARCHITECTURES.get(spec.strip(), spec).format(classes=classes)
    layers: list[Layer] = []
    for tok in (t.strip() for t in spec.split(",")):
        if not tok:
            continue
        name, *args = tok.split(":")
        try:
            nums = [int(a) for a in args]
        except ValueError:
            raise ValueError(f"bad layer token {tok!r}") from None
        if name == "conv":
            layers.append(Conv2d(*nums))
        elif name == "dense":
            layers.append(Dense(*nums))
        elif name == "relu":
            layers.append(ReLU())
        elif name == "pool":
            layers.append(MaxPool2d(*nums))
        elif name == "flatten":
            layers.append(Flatten())
        else:
            raise ValueError(f"unknown layer {name!r}")
    return layers


class Network:
    """A sequential model whose GEMM layers follow a PrecisionPolicy."""

    def __init__(self, layers: Sequence[Layer], input_shape: tuple[int, ...],
                 policy: PrecisionPolicy, seed: int = 0):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.policy = policy
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.build(shape)
        self.output_shape = shape
        gl = self.gemm_layers
        if not gl:
            raise ValueError("model has no trainable layers")
        for i, layer in enumerate(gl):
            layer.index = i
            layer.is_first = i == 0
            layer.is_last = i == len(gl) - 1
        gen = RngStream(seed, (0xC0FFEE,)).generator()
        for layer in gl:
            layer.init_state(policy, gen)

    @classmethod
    def from_spec(cls, spec: str, input_shape, classes: int, policy: PrecisionPolicy,
                  seed: int = 0) -> "Network":
        return cls(parse_layers(spec, classes), input_shape, policy, seed)

    @property
    def gemm_layers(self) -> list[_GemmLayer]:
        return [l for l in self.layers if isinstance(l, _GemmLayer)]

    def describe(self) -> str:
        return ", ".join(l.describe() for l in self.layers)

    def forward(self, x: np.ndarray, ctx: StepContext) -> RPTensor:
        p = ctx.policy
        h = RPTensor.encode(x, p.first_layer_input_format, stats=ctx.stats)
        for layer in self.layers:
            h = layer.forward(h, ctx)
        if h.fmt != p.softmax_input_format:
            h = convert_tensor(h, p.softmax_input_format, stats=ctx.stats)
        return h

    def backward(self, err: RPTensor, ctx: StepContext) -> None:
        g = err
        for layer in reversed(self.layers):
            g = layer.backward(g, ctx)
            if g is None:
                break

    def train_step(self, x: np.ndarray, y: np.ndarray, opt: OptimizerConfig,
                   ctx: StepContext) -> float:
        logits = self.forward(x, ctx)
        loss, err = F.softmax_xent(logits, y, ctx.policy.error_format, ctx.stats)
        err = scale_loss(err, ctx.policy.gemm, ctx.stats)
        self.backward(err, ctx)
        for layer in self.gemm_layers:
            layer.update(opt, ctx)
        return loss

    def predict(self, x: np.ndarray, batch_size: int = 256,
                stats: Optional[KernelStats] = None) -> np.ndarray:
        out = []
        ctx = StepContext(self.policy, training=False, stats=stats or KernelStats())
        for i in range(0, len(x), batch_size):
            out.append(self.forward(x[i:i + batch_size], ctx).values.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def loss(self, x: np.ndarray, y: np.ndarray) -> float:
        ctx = StepContext(self.policy, training=False)
        logits = self.forward(x, ctx)
        return F.softmax_xent(logits, y, self.policy.error_format)[0]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for l in self.gemm_layers:
            out[f"w{l.index}"] = l.state.master.values
            out[f"v{l.index}"] = l.state.momentum.values
            out[f"b{l.index}"] = l.bias.master.values
            out[f"bv{l.index}"] = l.bias.momentum.values
        return out

    def load_state_arrays(self, arrays) -> None:
        from fp8emu.nn.layers import LayerState
        p = self.policy
        for l in self.gemm_layers:
            _, w_fmt, _, _, _ = l.formats(p)
            w = RPTensor.encode(arrays[f"w{l.index}"], p.update_format, tid=l.tid)
            v = RPTensor.encode(arrays[f"v{l.index}"], p.update_format, tid=l.tid)
            l.state = LayerState(w, convert_tensor(w, w_fmt, p.compute_weight_rounding), v)
            b = RPTensor.encode(arrays[f"b{l.index}"], p.update_format, tid=l.tid + 1)
            bv = RPTensor.encode(arrays[f"bv{l.index}"], p.update_format, tid=l.tid + 1)
            l.bias = LayerState(b, b, bv)
