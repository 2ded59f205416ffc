import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfr import tensor as T
from dfr.layers import (
    AdaResidualBlock,
    BatchNorm2d,
    ConvBlock,
    GrlConfig,
    Linear,
    ResidualBlock,
    adain,
    conv_block,
    grl,
    instance_norm,
    norm_stats,
    residual_block,
)
from dfr.tensor import Tensor
from gradcheck import TOLERANCE, check_gradients

SEEDS = range(20)
F64 = np.float64


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def weighted_sum(out: Tensor, rng) -> Tensor:
    return T.tsum(out * Tensor(rng.normal(size=out.shape)))


# -- normalization --------------------------------------------------------------------

def test_instance_norm_constant_plane_is_zero():
    x = Tensor(np.full((1, 1, 4, 4), 3.0))
    np.testing.assert_allclose(instance_norm(x).data, 0.0, atol=1e-12)


def test_instance_norm_moments():
    rng = np.random.default_rng(0)
    out = instance_norm(Tensor(rng.normal(2.0, 3.0, (2, 3, 8, 8)))).data
    np.testing.assert_allclose(out.mean(axis=(2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(2, 3)), 1.0, atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.5, 10.0) | st.floats(-10.0, -0.5), st.floats(-5.0, 5.0), st.integers(0, 1000))
def test_instance_norm_affine_invariance(a, b, seed):
    x = np.random.default_rng(seed).normal(size=(2, 2, 8, 8))
    lhs = instance_norm(Tensor(a * x + b)).data
    rhs = np.sign(a) * instance_norm(Tensor(x)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-3)


def test_adain_identity_code_is_instance_norm():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    out = adain(x, Tensor(np.zeros(3)), Tensor(np.ones(3)))
    np.testing.assert_allclose(out.data, instance_norm(x).data)


def test_adain_sets_channel_moments():
    rng = np.random.default_rng(2)
    mu, sigma = rng.normal(size=(2, 3)), rng.uniform(0.5, 2.0, (2, 3))
    out = adain(instance_norm(Tensor(rng.normal(size=(2, 3, 8, 8)))), Tensor(mu), Tensor(sigma)).data
    m, s = norm_stats(out, eps=0.0)
    np.testing.assert_allclose(m, mu, atol=1e-2)
    np.testing.assert_allclose(s, sigma, atol=1e-2)


def test_adain_rejects_bad_code_shape():
    with pytest.raises(ValueError):
        adain(Tensor(np.zeros((2, 3, 4, 4))), Tensor(np.zeros(4)), Tensor(np.ones(3)))


def test_batchnorm_train_then_eval_uses_running_stats():
    rng = np.random.default_rng(3)
    bn = BatchNorm2d(2, dtype=F64)
    x = rng.normal(5.0, 2.0, (8, 2, 4, 4))
    out = bn(Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(bn._buffers["running_mean"], 0.1 * x.mean(axis=(0, 2, 3)))
    bn.eval()
    rm, rv = bn._buffers["running_mean"], bn._buffers["running_var"]
    expected = (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5)
    np.testing.assert_allclose(bn(Tensor(x)).data, expected)


# -- GRL -------------------------------------------------------------------------------

@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
def test_grl_contract(lam):
    rng = np.random.default_rng(4)
    x = leaf(rng, 3, 4)
    out = grl(x, GrlConfig(lam))
    assert np.array_equal(out.data, x.data)
    up = rng.normal(size=(3, 4))
    T.tsum(out * Tensor(up)).backward()
    assert np.array_equal(x.grad, -lam * up)


def test_grl_lambda_must_be_non_negative():
    with pytest.raises(ValueError):
        GrlConfig(-0.1)


# -- blocks ----------------------------------------------------------------------------

def test_conv_block_downsample_shape():
    out = conv_block(Tensor(np.zeros((1, 4, 8, 8))), 4, 6, downsample=True)
    assert out.shape == (1, 6, 4, 4)


def test_conv_block_rejects_wrong_channels():
    with pytest.raises(ValueError, match="channels"):
        ConvBlock(4, 6)(Tensor(np.zeros((1, 5, 8, 8))))


def test_residual_block_zero_weights_is_identity():
    rng = np.random.default_rng(5)
    blk = ResidualBlock(3, dtype=F64)
    for p in blk.parameters():
        p.data[...] = 0.0
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    np.testing.assert_array_equal(blk(x).data, x.data)


def test_residual_block_functional_shape():
    assert residual_block(Tensor(np.ones((1, 3, 4, 4))), 3).shape == (1, 3, 4, 4)


def _check_module(make, input_shape, extra=None, limit=16):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        mod = make(np.random.default_rng(100 + seed))
        x = leaf(rng, *input_shape)
        w = Tensor(rng.normal(size=mod(Tensor(x.data), *(extra or ())).shape))
        params = [x] + mod.parameters()
        err = check_gradients(lambda: T.tsum(mod(x, *(extra or ())) * w), params, rng, limit=limit)
        assert err < TOLERANCE, f"seed {seed}: {err}"


def test_linear_gradients():
    _check_module(lambda r: Linear(5, 3, rng=r, dtype=F64), (4, 5))


def test_batchnorm_gradients():
    _check_module(lambda r: BatchNorm2d(3, dtype=F64), (4, 3, 3, 3))


@pytest.mark.parametrize("norm", ["in", "bn", "none"])
def test_conv_block_gradients(norm):
    _check_module(lambda r: ConvBlock(3, 4, downsample=True, norm=norm, rng=r, dtype=F64), (2, 3, 6, 6))


def test_residual_block_gradients():
    _check_module(lambda r: ResidualBlock(3, rng=r, dtype=F64), (2, 3, 4, 4))


def test_instance_norm_and_adain_gradients():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        x, mu, sigma = leaf(rng, 2, 3, 4, 4), leaf(rng, 2, 3), leaf(rng, 2, 3)
        w = Tensor(rng.normal(size=(2, 3, 4, 4)))
        assert check_gradients(lambda: T.tsum(adain(x, mu, sigma) * w), [x, mu, sigma], rng) < TOLERANCE


def test_ada_residual_block_gradients():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        blk = AdaResidualBlock(3, rng=rng, dtype=F64)
        x = leaf(rng, 2, 3, 4, 4)
        sites = [(leaf(rng, 2, 3), leaf(rng, 2, 3)) for _ in range(2)]
        w = Tensor(rng.normal(size=(2, 3, 4, 4)))
        tensors = [x] + [t for s in sites for t in s] + blk.parameters()
        assert check_gradients(lambda: T.tsum(blk(x, sites) * w), tensors, rng, limit=12) < TOLERANCE


def test_grl_gradient_against_negated_finite_difference():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        x = leaf(rng, 3, 3)
        w = Tensor(rng.normal(size=(3, 3)))
        T.tsum(grl(x) * w).backward()
        np.testing.assert_array_equal(x.grad, -w.data)
