"""Finite-difference verification of every backward pass (64-bit mode)."""
import numpy as np
import pytest

from amtennet.extractors import AmtenExtractor, TraceWiring, build_variant
from amtennet.gradcheck import gradient_check, kink_margin, margined_input
from amtennet.layers import AvgPool2d, BatchNorm2d, FullyConnected, MaxPool2d, ReLU
from amtennet.models import build_mini
from amtennet.tensor import BatchNormParams, Tensor, he_conv
from amtennet.layers import Conv2d

PER_LAYER_TOL = 1e-5


def check(net, x, **kw):
    report = gradient_check(net, x, tolerance=PER_LAYER_TOL, **kw)
    assert report.passed, report.render()
    return report


@pytest.mark.parametrize("k,stride,padding", [(3, 1, 1), (3, 1, 0), (1, 1, 0), (5, 1, 2), (3, 2, 1), (5, 2, 2)])
def test_conv_gradients(k, stride, padding):
    rng = np.random.default_rng(k + stride)
    conv = Conv2d("conv", he_conv("conv", 2, 3, k, rng, stride=stride, padding=padding,
                                  dtype=np.float64))
    x = rng.normal(size=(2, 2, 8, 8))
    check(conv, x, seed=k)


def test_conv_zero_input_zero_kernel():
    rng = np.random.default_rng(0)
    conv = Conv2d("conv", he_conv("conv", 2, 2, 3, rng, padding=1, dtype=np.float64))
    conv.p.kernels.value[...] = 0.0
    report = gradient_check(conv, np.zeros((1, 2, 6, 6)), tolerance=PER_LAYER_TOL)
    assert report.passed
    assert np.all(conv.p.kernels.grad == 0.0)


def test_maxpool_gradient():
    pool = MaxPool2d("pool", kernel=3, stride=2, ceil_mode=True)
    x = np.random.default_rng(1).normal(size=(2, 2, 9, 9))
    check(pool, x)


def test_avgpool_gradient():
    pool = AvgPool2d("pool", kernel=3, stride=2, ceil_mode=True)
    x = np.random.default_rng(2).normal(size=(2, 2, 9, 9))
    check(pool, x)


def test_relu_gradient():
    relu = ReLU("relu")
    x = np.random.default_rng(3).normal(size=(2, 3, 6, 6))
    x = x + np.sign(x) * 0.01  # keep away from the kink
    check(relu, x)


def test_batchnorm_train_gradient():
    bn = BatchNorm2d("bn", BatchNormParams("bn", 3, dtype=np.float64))
    x = np.random.default_rng(4).normal(1.0, 2.0, size=(4, 3, 5, 5))
    check(bn, x, train=True)


def test_batchnorm_infer_gradient():
    bn = BatchNorm2d("bn", BatchNormParams("bn", 3, dtype=np.float64))
    bn.p.running_mean.value[...] = [0.3, -0.2, 0.9]
    bn.p.running_var.value[...] = [1.5, 0.7, 2.0]
    x = np.random.default_rng(5).normal(size=(2, 3, 5, 5))
    check(bn, x, train=False)


def test_fully_connected_gradient():
    rng = np.random.default_rng(6)
    fc = FullyConnected.create("fc", 10, 4, rng, dtype=np.float64)
    x = rng.normal(size=(3, 10))
    check(fc, x)


@pytest.mark.parametrize("seed", range(5))
def test_trace_block_gradient(seed):
    rng = np.random.default_rng(seed)
    block = AmtenExtractor(rng=rng, dtype=np.float64)
    x = rng.uniform(0.1, 0.9, size=(2, 3, 7, 7))
    check(block, x, seed=seed)


@pytest.mark.parametrize("variant", [1, 2, 3, 4, 5, 6])
def test_trace_block_variant_gradients(variant):
    rng = np.random.default_rng(variant * 11)
    block = build_variant(variant, rng=rng, dtype=np.float64)
    x = rng.uniform(0.1, 0.9, size=(1, 3, 8, 8))
    check(block, x, seed=variant)


@pytest.mark.parametrize("kind", ["highpass", "srm"])
def test_fixed_bank_input_gradient(kind):
    from amtennet.extractors import FixedBankExtractor

    bank = FixedBankExtractor(kind, dtype=np.float64)
    x = np.random.default_rng(8).uniform(size=(1, 3, 8, 8))
    check(bank, x)  # params are fixed; this verifies the edge-pad adjoint


def test_constrained_extractor_gradient():
    from amtennet.extractors import ConstrainedConvExtractor

    ex = ConstrainedConvExtractor(rng=np.random.default_rng(12), dtype=np.float64)
    x = np.random.default_rng(13).uniform(size=(1, 3, 8, 8))
    check(ex, x)


def test_trace_block_zero_upstream_zero_param_grads():
    rng = np.random.default_rng(9)
    block = AmtenExtractor(rng=rng, dtype=np.float64)
    x = rng.uniform(size=(1, 3, 6, 6))
    block.forward(Tensor(x))
    for p in block.params():
        p.zero_grad()
    block.backward(np.zeros((1, 15, 6, 6)))
    for p in block.params():
        assert np.all(p.grad == 0.0), p.name


def test_trace_block_backward_is_additive_across_slots():
    # the low-level trace map feeds three concat slots; the input gradient
    # for a combined upstream must equal the sum over per-slot upstreams
    rng = np.random.default_rng(10)
    block = AmtenExtractor(rng=rng, dtype=np.float64)
    x = rng.uniform(size=(1, 3, 6, 6))
    block.forward(Tensor(x))
    g = rng.normal(size=(1, 15, 6, 6))
    for p in block.params():
        p.zero_grad()
    combined = block.backward(g)
    total = np.zeros_like(combined)
    for sl in (slice(0, 6), slice(6, 9), slice(9, 12), slice(12, 15)):
        g_part = np.zeros_like(g)
        g_part[:, sl] = g[:, sl]
        for p in block.params():
            p.zero_grad()
        total += block.backward(g_part)
    assert np.allclose(combined, total, atol=1e-12)


def test_whole_mini_network_gradient():
    rng = np.random.default_rng(123)
    model = build_mini(num_classes=3, input_size=40, rng=rng, dtype=np.float64)
    x = margined_input(model, (2, 3, 40, 40), seed=7)
    labels = np.array([0, 2])
    report = gradient_check(model, x, labels=labels, tolerance=1e-4,
                            samples_per_block=6, train=True, seed=7)
    assert report.passed, report.render()


def test_margined_input_reports_margin():
    rng = np.random.default_rng(11)
    model = build_mini(num_classes=2, input_size=40, rng=rng, dtype=np.float64)
    x = margined_input(model, (2, 3, 40, 40), seed=1)
    assert kink_margin(model, x) > 2e-5
