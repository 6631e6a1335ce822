from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from fp8emu.kernels import KernelStats
from fp8emu.nn.layers import OptimizerConfig, StepContext
from fp8emu.nn.model import Network
from fp8emu.rng import RngStream


class DivergenceError(RuntimeError):
    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int
    name: str = "dataset"

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.x_train.shape[1:]


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    test_error: float
    saturation_count: int


@dataclass
class TrainResult:
    history: list[EpochRow]
    stats: KernelStats = field(default_factory=KernelStats)

    @property
    def final_test_error(self) -> float:
        return self.history[-1].test_error


def evaluate(model: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    """Test error in percent."""
    if len(y) == 0:
        return 0.0
    pred = model.predict(x, batch_size)
    return 100.0 * float(np.mean(pred != y))


def train(model: Network, data: Dataset, opt: OptimizerConfig, epochs: int, seed: int = 0,
          batch_size: int = 64, log: Optional[Callable[[EpochRow], None]] = None) -> TrainResult:
    """Minibatch SGD under the model's precision policy.

    Row 0 holds the initial test error. Aborts with ``DivergenceError`` if
    the loss is non-finite, or exceeds 10x the first-batch loss for three
    consecutive epochs.
    """
    stats = KernelStats()
    history = [EpochRow(0, math.nan, evaluate(model, data.x_test, data.y_test), 0)]
    if log:
        log(history[0])
    shuffle = RngStream(seed, (0x5EED,)).generator()
    n = len(data.y_train)
    step = 0
    initial_loss = None
    high_epochs = 0
    rng = RngStream(seed, (0xA8F,))
    for epoch in range(1, epochs + 1):
        ctx = StepContext(model.policy, rng=rng, stats=KernelStats())
        order = shuffle.permutation(n)
        losses = []
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            ctx.step = step
            loss = model.train_step(data.x_train[idx], data.y_train[idx], opt, ctx)
            if initial_loss is None:
                initial_loss = loss
            if not math.isfinite(loss):
                history.append(EpochRow(epoch, loss, math.nan, ctx.stats.saturations))
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}", history)
            losses.append(loss)
            step += 1
        stats.merge(ctx.stats)
        row = EpochRow(epoch, float(np.mean(losses)),
                       evaluate(model, data.x_test, data.y_test), ctx.stats.saturations)
        history.append(row)
        if log:
            log(row)
        high_epochs = high_epochs + 1 if row.train_loss > 10 * initial_loss else 0
        if high_epochs >= 3:
            raise DivergenceError(
                f"train loss {row.train_loss:.4g} above 10x initial ({initial_loss:.4g}) "
                f"for 3 epochs", history)
    return TrainResult(history, stats)
