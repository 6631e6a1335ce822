import math

import numpy as np
import pytest

from fp8emu.kernels import PrecisionConfig, RPTensor, convert_tensor
from fp8emu.minifloat import FP8, FP16, FP32, NEAREST, STOCHASTIC, quantize
from fp8emu.nn import (
    Conv2d,
    Dataset,
    Dense,
    LayerState,
    Network,
    OptimizerConfig,
    PrecisionPolicy,
    StepContext,
    conv_backward,
    conv_forward,
    conv_gradient,
    fc_backward,
    fc_forward,
    fc_gradient,
    parse_layers,
    sgd_step,
    softmax_xent,
    train,
)
from fp8emu.nn.train import DivergenceError
from fp8emu.data import SyntheticSpec, load_synthetic
from fp8emu.rng import RngStream
from oracles import direct_conv, direct_conv_rounded, oracle_gemm

FP32_EMU = PrecisionConfig.fp32(chunk=1, emulate=True)


def t(x, fmt):
    return RPTensor.encode(np.asarray(x, dtype=float), fmt)


class TestFunctional:
    def test_identity_weight(self):
        x = t(np.random.default_rng(0).normal(size=(4, 6)), FP8)
        W = t(np.eye(6), FP8)
        assert np.array_equal(fc_forward(x, W, PrecisionConfig()).values, x.values)

    def test_zero_error(self):
        gen = np.random.default_rng(1)
        x, W = t(gen.normal(size=(3, 5)), FP8), t(gen.normal(size=(4, 5)), FP8)
        dy = t(np.zeros((3, 4)), FP8)
        cfg = PrecisionConfig()
        assert not fc_gradient(dy, x, cfg).values.any()
        assert not fc_backward(dy, W, cfg).values.any()

    def test_fc_matches_scalar_oracle(self):
        gen = np.random.default_rng(2)
        x = t(gen.normal(size=(16, 64)), FP8)
        W = t(gen.normal(size=(32, 64)), FP8)
        dy = t(gen.normal(size=(16, 32)), FP8)
        cfg = PrecisionConfig(chunk=8)
        assert np.array_equal(fc_forward(x, W, cfg).values, oracle_gemm(W, x.T, cfg).T)
        assert np.array_equal(fc_backward(dy, W, cfg).values, oracle_gemm(W.T, dy.T, cfg).T)
        assert np.array_equal(fc_gradient(dy, x, cfg).values, oracle_gemm(dy.T, x, cfg))

    def test_conv_matches_direct_oracles(self):
        gen = np.random.default_rng(3)
        x = t(gen.normal(size=(2, 3, 8, 8)), FP8)
        W = t(gen.normal(size=(4, 3, 3, 3)), FP8)
        cfg = PrecisionConfig(chunk=8)
        y = conv_forward(x, W, cfg, pad=1)
        assert np.array_equal(y.values, direct_conv_rounded(x, W, 1, FP16, 8))
        wide = direct_conv(x.values, W.values, 1)
        assert np.allclose(y.values, wide, rtol=0, atol=2e-2 * np.abs(wide).max())

    def test_one_by_one_conv_is_fc(self):
        gen = np.random.default_rng(4)
        x = t(gen.normal(size=(2, 5, 3, 3)), FP8)
        W = t(gen.normal(size=(4, 5, 1, 1)), FP8)
        cfg = PrecisionConfig()
        y = conv_forward(x, W, cfg)
        flat = x.values.transpose(0, 2, 3, 1).reshape(-1, 5)
        ref = fc_forward(RPTensor(flat, FP8), W.reshape(4, 5), cfg).values
        assert np.array_equal(y.values.transpose(0, 2, 3, 1).reshape(-1, 4), ref)

    def test_delta_kernel(self):
        gen = np.random.default_rng(5)
        x = t(gen.normal(size=(1, 1, 5, 5)), FP8)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        y = conv_forward(x, t(w, FP8), PrecisionConfig(), pad=1)
        assert np.array_equal(y.values, x.values)

    def test_conv_backward_and_gradient_are_adjoints(self):
        # for L = <G, conv(x, W)>: dL/dx = conv_backward(G), dL/dW = conv_gradient(G, x)
        gen = np.random.default_rng(6)
        x = t(gen.normal(size=(2, 3, 6, 6)), FP32)
        W = t(gen.normal(size=(4, 3, 3, 3)), FP32)
        G = t(gen.normal(size=(2, 4, 6, 6)), FP32)
        dx = conv_backward(G, W, FP32_EMU, pad=1).values
        dW = conv_gradient(G, x, FP32_EMU, pad=1, k=3).values
        L = lambda xv, wv: np.sum(G.values * direct_conv(xv, wv, 1))
        eps = 1e-6
        for idx in [(0, 0, 0, 0), (1, 2, 3, 5), (0, 1, 5, 0)]:
            e = np.zeros_like(x.values)
            e[idx] = eps
            fd = (L(x.values + e, W.values) - L(x.values - e, W.values)) / (2 * eps)
            assert abs(dx[idx] - fd) <= 1e-4 * max(abs(fd), 1e-3)
        for idx in [(0, 0, 0, 0), (3, 2, 2, 1), (1, 1, 1, 1)]:
            e = np.zeros_like(W.values)
            e[idx] = eps
            fd = (L(x.values, W.values + e) - L(x.values, W.values - e)) / (2 * eps)
            assert abs(dW[idx] - fd) <= 1e-4 * max(abs(fd), 1e-3)

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            conv_forward(t(np.zeros((1, 2, 4, 4)), FP8), t(np.zeros((1, 3, 3, 3)), FP8),
                         PrecisionConfig())
        with pytest.raises(ValueError):
            fc_forward(t(np.zeros((2, 3)), FP8), t(np.zeros((4, 5)), FP8), PrecisionConfig())


class TestSoftmax:
    def test_uniform_logits(self):
        loss, err = softmax_xent(t(np.zeros((4, 10)), FP16), np.arange(4), FP16)
        assert loss == pytest.approx(math.log(10))
        expect = np.full((4, 10), 0.1)
        expect[np.arange(4), np.arange(4)] -= 1
        assert np.array_equal(err.values, quantize(expect / 4, FP16))

    def test_dominant_logit(self):
        z = np.zeros((1, 3))
        z[0, 2] = 50
        loss, _ = softmax_xent(t(z, FP16), np.array([2]), FP16)
        assert loss < 1e-12

    def test_matches_wide_oracle(self):
        gen = np.random.default_rng(7)
        z = t(gen.normal(size=(8, 10)) * 3, FP16)
        y = gen.integers(0, 10, 8)
        loss, err = softmax_xent(z, y, FP16)
        p = np.exp(z.values) / np.exp(z.values).sum(1, keepdims=True)
        assert loss == pytest.approx(-np.mean(np.log(p[np.arange(8), y])), rel=1e-12)
        g = p.copy()
        g[np.arange(8), y] -= 1
        assert np.array_equal(err.values, quantize(g / 8, FP16))

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            softmax_xent(t(np.zeros((2, 3)), FP16), np.array([0, 3]), FP16)


class TestSgd:
    def _state(self, w, fmt=FP16):
        return LayerState.create(np.asarray(w, float), fmt, FP8, tid=1)

    def test_plain_sgd(self):
        s = self._state([1.0, -2.0])
        dW = t([0.5, 0.25], FP16)
        out = sgd_step(s, dW, OptimizerConfig(0.5, 0.0, 0.0), NEAREST, None, 0)
        assert list(out.master.values) == [0.75, -2.125]

    def test_zero_gradient_is_fixed_point(self):
        s = self._state([1.0, 0.3, -7.5])
        dW = t(np.zeros(3), FP16)
        out = sgd_step(s, dW, OptimizerConfig(0.1, 0.9, 0.0), STOCHASTIC, RngStream(1), 0)
        assert np.array_equal(out.master.bits, s.master.bits)
        assert np.array_equal(out.momentum.bits, s.momentum.bits)

    def test_three_axpy_order(self):
        # g = dW + l2 w ; v = g + mu v ; w = w - lr v  (all exact here)
        s = self._state([1.0])
        s = LayerState(s.master, s.compute, t([0.5], FP16))
        out = sgd_step(s, t([0.25], FP16), OptimizerConfig(0.5, 0.5, 0.25), NEAREST, None, 0)
        assert out.momentum.values[0] == 0.25 + 0.25 + 0.25
        assert out.master.values[0] == 1.0 - 0.375

    def test_nearest_stalls_stochastic_moves(self):
        s = self._state(np.ones(4000))
        dW = t(np.full(4000, 2.0**-13), FP16)
        opt = OptimizerConfig(1.0, 0.0, 0.0)
        near = sgd_step(s, dW, opt, NEAREST, None, 0)
        assert np.all(near.master.values == 1.0)
        sto = sgd_step(s, dW, opt, STOCHASTIC, RngStream(2), 0)
        moved = np.mean(sto.master.values != 1.0)
        assert 0.09 < moved < 0.16
        assert sto.master.values.mean() == pytest.approx(1.0 - 2.0**-13, abs=3e-5)

    def test_compute_copy_coherence(self):
        gen = np.random.default_rng(8)
        s = self._state(gen.normal(size=100))
        for step in range(5):
            dW = t(gen.normal(size=100) * 0.1, FP16)
            s = sgd_step(s, dW, OptimizerConfig(), STOCHASTIC, RngStream(3), step)
            assert np.array_equal(s.compute.bits, convert_tensor(s.master, FP8, NEAREST).bits)

    def test_optimizer_validation(self):
        with pytest.raises(ValueError):
            OptimizerConfig(momentum=1.0)
        with pytest.raises(ValueError):
            OptimizerConfig(l2_lambda=-1)


# --- whole-network properties ---------------------------------------------------

def _digits_like(n=48, seed=0, shape=(1, 8, 8), classes=4):
    gen = np.random.default_rng(seed)
    x = gen.random((n,) + shape)
    y = gen.integers(0, classes, n)
    return x, y


def _numpy_forward(model, x):
    """Independent float64 forward pass over the model's weights."""
    h = x
    for layer in model.layers:
        name = type(layer).__name__
        if name == "Conv2d":
            h = direct_conv(h, layer.state.master.values, layer.pad)
            h = h + layer.bias.master.values[None, :, None, None]
        elif name == "Dense":
            h = h @ layer.state.master.values.T + layer.bias.master.values
        elif name == "ReLU":
            h = np.maximum(h, 0)
        elif name == "MaxPool2d":
            s = layer.size
            B, C, H, W = h.shape
            h = h.reshape(B, C, H // s, s, W // s, s).max(axis=(3, 5))
        elif name == "Flatten":
            h = h.reshape(h.shape[0], -1)
    return h


def _numpy_loss(model, x, y):
    z = _numpy_forward(model, x)
    z = z - z.max(1, keepdims=True)
    return float(-np.mean(z[np.arange(len(y)), y] - np.log(np.exp(z).sum(1))))


@pytest.mark.parametrize("arch", ["conv:3:3, relu, pool:2, flatten, dense:4",
                                  "flatten, dense:12, relu, dense:4"])
def test_gradient_finite_differences(arch):
    x, y = _digits_like(6, seed=1)
    policy = PrecisionPolicy.fp32_baseline(emulate=True, chunk=1)
    model = Network(parse_layers(arch), (1, 8, 8), policy, seed=3)
    ctx = StepContext(policy)
    logits = model.forward(x, ctx)
    _, err = softmax_xent(logits, y, policy.error_format)
    model.backward(err, ctx)
    eps = 1e-6
    for layer in model.gemm_layers:
        w = layer.state.master.values
        gen = np.random.default_rng(layer.index)
        for _ in range(6):
            idx = tuple(gen.integers(0, s) for s in w.shape)
            old = w[idx]
            w[idx] = old + eps
            lp = _numpy_loss(model, x, y)
            w[idx] = old - eps
            lm = _numpy_loss(model, x, y)
            w[idx] = old
            fd = (lp - lm) / (2 * eps)
            got = layer.dW.values[idx]
            assert abs(got - fd) <= 1e-4 * max(abs(fd), 1e-2), (layer.describe(), idx, got, fd)
        fdb = []
        b = layer.bias.master.values
        for j in range(min(3, b.size)):
            old = b[j]
            b[j] = old + eps
            lp = _numpy_loss(model, x, y)
            b[j] = old - eps
            lm = _numpy_loss(model, x, y)
            b[j] = old
            fdb.append((lp - lm) / (2 * eps))
        assert np.allclose(layer.db.values[:len(fdb)], fdb, rtol=1e-4, atol=1e-6)


def _small_model(policy, seed=0):
    return Network.from_spec("conv:4:3, relu, pool:2, flatten, dense:8, relu, dense:4",
                             (1, 8, 8), 4, policy, seed)


def test_precision_placement_audit():
    policy = PrecisionPolicy.fp8_scheme()
    model = _small_model(policy)
    x, y = _digits_like(8)
    ctx = StepContext(policy, rng=RngStream(0))
    logits = model.forward(x, ctx)
    assert logits.fmt == FP16
    model.train_step(x, y, OptimizerConfig(), ctx)
    last = len(model.gemm_layers) - 1
    seen = set()
    for index, op, a_fmt, b_fmt, acc_or_mode in ctx.trace:
        seen.add((index, op))
        if op == "update":
            assert (a_fmt, b_fmt, acc_or_mode) == ("fp16", "fp16", "stochastic")
        elif index == last:
            assert (a_fmt, b_fmt, acc_or_mode) == ("fp16", "fp16", "fp16")
        elif index == 0 and op == "forward":
            assert (a_fmt, b_fmt, acc_or_mode) == ("fp16", "fp8", "fp16")
        elif index == 0 and op == "gradient":
            # errors in FP8 against the FP16 input images
            assert (a_fmt, b_fmt, acc_or_mode) == ("fp8", "fp16", "fp16")
        else:
            assert (a_fmt, b_fmt, acc_or_mode) == ("fp8", "fp8", "fp16")
    # first layer has no backward GEMM; everything else runs all three
    assert (0, "backward") not in seen
    for i in range(len(model.gemm_layers)):
        assert {(i, "forward"), (i, "gradient"), (i, "update")} <= seen
    for layer in model.gemm_layers:
        assert layer.state.master.fmt == FP16 and layer.state.momentum.fmt == FP16
        assert layer.state.compute.fmt == (FP16 if layer.is_last else FP8)


def test_master_compute_coherence_during_training():
    policy = PrecisionPolicy.fp8_scheme()
    model = _small_model(policy)
    x, y = _digits_like(32)
    opt = OptimizerConfig()
    for step in range(4):
        ctx = StepContext(policy, step=step, rng=RngStream(1))
        model.train_step(x[step * 8:(step + 1) * 8], y[step * 8:(step + 1) * 8], opt, ctx)
        for layer in model.gemm_layers:
            s = layer.state
            assert np.array_equal(s.compute.bits, convert_tensor(s.master, s.compute.fmt, NEAREST).bits)


def test_loss_scale_invariance_at_fp32():
    x, y = _digits_like(64, seed=2)
    preds = []
    for scale in (1.0, 1000.0):
        base = PrecisionPolicy.fp32_baseline()
        policy = base.with_(gemm=base.gemm.with_(loss_scale=scale))
        model = _small_model(policy, seed=4)
        opt = OptimizerConfig(0.05, 0.9, 1e-4)
        for step in range(6):
            ctx = StepContext(policy, step=step, rng=RngStream(2))
            model.train_step(x[step * 8:(step + 1) * 8], y[step * 8:(step + 1) * 8], opt, ctx)
        preds.append(model.predict(x))
    assert np.array_equal(preds[0], preds[1])


def _tiny_dataset():
    x, y = _digits_like(96, seed=5)
    return Dataset(x[:64], y[:64], x[64:], y[64:], 4, "random")


def test_training_is_reproducible():
    data = _tiny_dataset()
    runs = []
    for _ in range(2):
        model = _small_model(PrecisionPolicy.fp8_scheme(), seed=6)
        res = train(model, data, OptimizerConfig(), 2, seed=3, batch_size=16)
        runs.append(([vars(r) for r in res.history], model.state_arrays()))
    (h1, s1), (h2, s2) = runs
    assert repr(h1) == repr(h2)
    for k in s1:
        assert s1[k].tobytes() == s2[k].tobytes()


def test_zero_learning_rate_keeps_metrics_constant():
    data = _tiny_dataset()
    model = _small_model(PrecisionPolicy.fp8_scheme(), seed=7)
    res = train(model, data, OptimizerConfig(0.0, 0.9, 1e-4), 3, seed=1, batch_size=16)
    errors = {r.test_error for r in res.history}
    losses = {r.train_loss for r in res.history[1:]}
    assert len(errors) == 1 and len(losses) == 1


def test_divergence_detector():
    data = _tiny_dataset()
    model = _small_model(PrecisionPolicy.fp32_baseline(), seed=8)
    with pytest.raises(DivergenceError) as info:
        train(model, data, OptimizerConfig(1e30, 0.0, 0.0), 5, seed=1, batch_size=16)
    assert info.value.history


@pytest.mark.parametrize("policy", [PrecisionPolicy.fp32_baseline(), PrecisionPolicy.fp8_scheme()],
                         ids=["fp32", "fp8"])
def test_linear_model_fits_separable_blobs(policy):
    data = load_synthetic(SyntheticSpec(2, 16, 4.0, 1024, seed=3))
    model = Network.from_spec("linear", data.input_shape, 2, policy, seed=0)
    train(model, data, OptimizerConfig(0.05, 0.9, 1e-4), 20, seed=0, batch_size=32)
    train_err = 100 * np.mean(model.predict(data.x_train) != data.y_train)
    assert train_err <= 2.0


def test_parse_layers():
    layers = parse_layers("cnn", 10)
    assert [l.describe() for l in layers] == ["conv:8:3", "relu", "conv:16:3", "relu", "pool:2",
                                              "flatten", "dense:10"]
    with pytest.raises(ValueError):
        parse_layers("dense:x")
    with pytest.raises(ValueError):
        parse_layers("bogus:3")
    with pytest.raises(ValueError):
        Conv2d(8, 2)
    with pytest.raises(ValueError):
        Network([Dense(3)], (1, 4, 4), PrecisionPolicy.fp8_scheme())
