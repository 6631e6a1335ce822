"""A small trainable network wired through the FP8/FP16 precision placement."""

from fp8emu.nn.functional import (
    conv_backward,
    conv_forward,
    conv_gradient,
    fc_backward,
    fc_forward,
    fc_gradient,
    im2col,
    softmax_xent,
)
from fp8emu.nn.layers import (
    Conv2d,
    Dense,
    Flatten,
    LayerState,
    MaxPool2d,
    OptimizerConfig,
    PrecisionPolicy,
    ReLU,
    StepContext,
    sgd_step,
)
from fp8emu.nn.model import Network, parse_layers
from fp8emu.nn.train import Dataset, DivergenceError, TrainResult, evaluate, train
