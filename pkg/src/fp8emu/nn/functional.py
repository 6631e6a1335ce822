"""Forward, Backward and Gradient GEMMs for fully-connected and conv layers.

Every op is a single ``chunked_gemm``. Convolutions are lowered first
(patch extraction is pure data movement), and the conv backward pass is
lowered as a full correlation with flipped kernels so that all additions
happen inside the chunked accumulator.

Shapes: FC activations are ``(batch, features)`` and weights ``(out, in)``;
conv activations are ``(batch, channels, height, width)`` and weights
``(out, in, k, k)``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from fp8emu.kernels import KernelStats, PrecisionConfig, RPTensor, chunked_gemm
from fp8emu.minifloat import FloatFormat, quantize
from fp8emu.rng import RngStream


def fc_forward(x: RPTensor, W: RPTensor, cfg: PrecisionConfig, rng: Optional[RngStream] = None,
               step: int = 0, out_id: int = 0, stats: Optional[KernelStats] = None) -> RPTensor:
    """y = W x per sample; returns (batch, out) in ``cfg.fp_acc``."""
    y = chunked_gemm(W, x.T, cfg, rng, step, out_id, stats)
    return y.T


def fc_backward(dy: RPTensor, W: RPTensor, cfg: PrecisionConfig, rng: Optional[RngStream] = None,
                step: int = 0, out_id: int = 0, stats: Optional[KernelStats] = None) -> RPTensor:
    """dx = W^T dy per sample; returns (batch, in)."""
    dx = chunked_gemm(W.T, dy.T, cfg, rng, step, out_id, stats)
    return dx.T


def fc_gradient(dy: RPTensor, x: RPTensor, cfg: PrecisionConfig, rng: Optional[RngStream] = None,
                step: int = 0, out_id: int = 0, stats: Optional[KernelStats] = None) -> RPTensor:
    """dW = dy^T x, reduced over the minibatch; returns (out, in)."""
    return chunked_gemm(dy.T, x, cfg, rng, step, out_id, stats)


def im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Lower (B, C, H, W) to (C*k*k, B*Ho*Wo); rows ordered (c, i, j), columns (b, h, w)."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = H + 2 * pad - k + 1, W + 2 * pad - k + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # win: (B, C, Ho, Wo, k, k) -> (C, k, k, B, Ho, Wo)
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(C * k * k, B * Ho * Wo)


def _conv_shape(x_shape, k: int, pad: int) -> tuple[int, int]:
    return x_shape[2] + 2 * pad - k + 1, x_shape[3] + 2 * pad - k + 1


def conv_forward(x: RPTensor, W: RPTensor, cfg: PrecisionConfig, pad: int = 0,
                 rng: Optional[RngStream] = None, step: int = 0, out_id: int = 0,
                 stats: Optional[KernelStats] = None) -> RPTensor:
    B = x.shape[0]
    Co, Ci, k, _ = W.shape
    if x.shape[1] != Ci:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, kernel {Ci}")
    Ho, Wo = _conv_shape(x.shape, k, pad)
    cols = RPTensor(im2col(x.values, k, pad), x.fmt, x.tid)
    y = chunked_gemm(W.reshape(Co, Ci * k * k), cols, cfg, rng, step, out_id, stats)
    out = y.values.reshape(Co, B, Ho, Wo).transpose(1, 0, 2, 3)
    return RPTensor(np.ascontiguousarray(out), y.fmt, out_id)


def flip_kernel(W: RPTensor) -> RPTensor:
    """(out, in, k, k) -> (in, out, k, k) with both spatial axes reversed."""
    return RPTensor(np.ascontiguousarray(W.values[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)),
                    W.fmt, W.tid)


def conv_backward(dy: RPTensor, W: RPTensor, cfg: PrecisionConfig, pad: int = 0,
                  rng: Optional[RngStream] = None, step: int = 0, out_id: int = 0,
                  stats: Optional[KernelStats] = None) -> RPTensor:
    """Input error as a full correlation of dy with the flipped kernel."""
    k = W.shape[2]
    return conv_forward(dy, flip_kernel(W), cfg, k - 1 - pad, rng, step, out_id, stats)


def conv_gradient(dy: RPTensor, x: RPTensor, cfg: PrecisionConfig, pad: int = 0,
                  k: int = 3, rng: Optional[RngStream] = None, step: int = 0,
                  out_id: int = 0, stats: Optional[KernelStats] = None) -> RPTensor:
    """dW = dy_lowered @ cols^T; the inner dimension runs over (b, h, w)."""
    B, Co, Ho, Wo = dy.shape
    Ci = x.shape[1]
    cols = im2col(x.values, k, pad)
    dym = dy.values.transpose(1, 0, 2, 3).reshape(Co, B * Ho * Wo)
    g = chunked_gemm(RPTensor(dym, dy.fmt), RPTensor(cols.T, x.fmt), cfg, rng, step, out_id, stats)
    return g.reshape(Co, Ci, k, k)


def add_bias(y: RPTensor, b: RPTensor, axis: int, stats: Optional[KernelStats] = None) -> RPTensor:
    """y + b broadcast along ``axis``, rounded once (nearest) into y's format."""
    shape = [1] * y.values.ndim
    shape[axis] = -1
    bb = b.values.reshape(shape)
    s = y.values + bb
    t = s - y.values
    err = (y.values - (s - t)) + (bb - t)
    return RPTensor(quantize(s, y.fmt, residual=err, stats=stats), y.fmt, y.tid)


def bias_gradient(dy: RPTensor, axis: int, cfg: PrecisionConfig,
                  rng: Optional[RngStream] = None, step: int = 0, out_id: int = 0,
                  stats: Optional[KernelStats] = None) -> RPTensor:
    """Sum dy over every axis except ``axis`` through the chunked accumulator."""
    v = np.moveaxis(dy.values, axis, 0)
    m = v.reshape(v.shape[0], -1)
    ones = RPTensor(np.ones((m.shape[1], 1)), cfg.fp_mult)
    return chunked_gemm(RPTensor(m, dy.fmt), ones, cfg, rng, step, out_id, stats).reshape(-1)


def softmax_xent(logits: RPTensor, labels: np.ndarray, err_fmt: FloatFormat,
                 stats: Optional[KernelStats] = None) -> tuple[float, RPTensor]:
    """Mean cross-entropy and the error (p - onehot) / batch rounded into ``err_fmt``.

    The softmax itself runs in float64; loss scaling is applied by the caller.
    """
    z = logits.values
    labels = np.asarray(labels)
    B, C = z.shape
    if labels.shape != (B,) or labels.min() < 0 or labels.max() >= C:
        raise ValueError("label out of range")
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    logp = z - np.log(ez.sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(B), labels].mean())
    g = p.copy()
    g[np.arange(B), labels] -= 1.0
    g /= B
    return loss, RPTensor(quantize(g, err_fmt, stats=stats), err_fmt)
