import math

import numpy as np
import pytest

from replab.blocks import (
    basic_block_forward,
    bottleneck_forward,
    init_basic_block,
    init_block,
    init_bottleneck_block,
    init_vit_block,
    vit_block_forward,
)
from replab.tensor import Tensor, grad_check, tsum


def zero_branch(block):
    """Zero every parameter on the residual branch (convs + BN affines)."""
    for _, p in block.named_params():
        p.data = np.zeros_like(p.data)
    return block


# --- straight-line reference implementations (independent of the Tensor ops) ---

def np_conv(x, w, stride, pad):
    b, cin, h, wd = x.shape
    cout, _, q, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - q) // stride + 1
    wo = (wd + 2 * pad - q) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for bi in range(b):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride : i * stride + q, j * stride : j * stride + q]
                    out[bi, co, i, j] = np.sum(patch * w[co])
    return out


def np_bn_train(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = ((x - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)


def np_ln(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_msa(x, p):
    b, t, d = x.shape
    h = p.heads
    dh = d // h

    def proj(z, w, bias):
        return z @ w.data.T + bias.data

    def split(z):
        return z.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

    q, k, v = split(proj(x, p.wq, p.bq)), split(proj(x, p.wk, p.bk)), split(proj(x, p.wv, p.bv))
    probs = np_softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh))
    mixed = (probs @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return proj(mixed, p.wo, p.bo)


class TestBasicBlock:
    def test_zero_branch_is_relu(self):
        rng = np.random.default_rng(0)
        block = zero_branch(init_basic_block(4, seed=1))
        x = Tensor(rng.normal(size=(2, 4, 5, 5)))
        out = basic_block_forward(block, x, "train")
        np.testing.assert_array_equal(out.data, np.maximum(x.data, 0.0))

    def test_zero_input_zero_shift(self):
        block = zero_branch(init_basic_block(3, seed=2))
        out = basic_block_forward(block, Tensor(np.zeros((1, 3, 4, 4))), "train")
        np.testing.assert_array_equal(out.data, 0.0)

    def test_matches_duplicate_implementation(self):
        rng = np.random.default_rng(3)
        block = init_basic_block(4, seed=4)
        x = rng.normal(size=(2, 4, 5, 5))
        got = basic_block_forward(block, Tensor(x), "train").data
        z = np.maximum(np_bn_train(np_conv(x, block.conv1.data, 1, 1),
                                   block.bn1.gamma.data, block.bn1.beta.data), 0.0)
        u = np_bn_train(np_conv(z, block.conv2.data, 1, 1),
                        block.bn2.gamma.data, block.bn2.beta.data)
        np.testing.assert_allclose(got, np.maximum(x + u, 0.0), atol=1e-12)

    def test_downsample_variant_shapes(self):
        block = init_basic_block(8, c_in=4, stride=2, seed=5)
        out = basic_block_forward(block, Tensor(np.ones((1, 4, 8, 8))), "eval")
        assert out.shape == (1, 8, 4, 4)


class TestBottleneck:
    def test_zero_branch_is_relu(self):
        rng = np.random.default_rng(1)
        block = zero_branch(init_bottleneck_block(8, 2, seed=1))
        x = Tensor(rng.normal(size=(1, 8, 4, 4)))
        out = bottleneck_forward(block, x, "train")
        np.testing.assert_array_equal(out.data, np.maximum(x.data, 0.0))

    def test_zero_input(self):
        block = zero_branch(init_bottleneck_block(4, 2, seed=2))
        out = bottleneck_forward(block, Tensor(np.zeros((1, 4, 4, 4))), "train")
        np.testing.assert_array_equal(out.data, 0.0)

    def test_matches_duplicate_implementation(self):
        rng = np.random.default_rng(9)
        block = init_bottleneck_block(8, 2, seed=6)
        x = rng.normal(size=(2, 8, 4, 4))
        got = bottleneck_forward(block, Tensor(x), "train").data
        z1 = np.maximum(np_bn_train(np_conv(x, block.conv_red.data, 1, 0),
                                    block.bn1.gamma.data, block.bn1.beta.data), 0.0)
        z2 = np.maximum(np_bn_train(np_conv(z1, block.conv_mid.data, 1, 1),
                                    block.bn2.gamma.data, block.bn2.beta.data), 0.0)
        u = np_bn_train(np_conv(z2, block.conv_exp.data, 1, 0),
                        block.bn3.gamma.data, block.bn3.beta.data)
        np.testing.assert_allclose(got, np.maximum(x + u, 0.0), atol=1e-12)


class TestViTBlock:
    def test_zero_weights_zero_gammas_is_identity(self):
        rng = np.random.default_rng(2)
        block = zero_branch(init_vit_block(8, 2, seed=3))
        x = Tensor(rng.normal(size=(2, 3, 8)))
        out = vit_block_forward(block, x)
        np.testing.assert_allclose(out.data, x.data, atol=1e-15)

    def test_matches_duplicate_implementation(self):
        rng = np.random.default_rng(4)
        block = init_vit_block(8, 2, mlp_ratio=2, seed=7)
        x = rng.normal(size=(2, 4, 8))
        got = vit_block_forward(block, Tensor(x)).data
        u = x + np_msa(np_ln(x, block.ln1.gamma.data, block.ln1.beta.data), block)
        hmid = np_gelu(np_ln(u, block.ln2.gamma.data, block.ln2.beta.data)
                       @ block.mlp1.data.T + block.b_mlp1.data)
        ref = u + hmid @ block.mlp2.data.T + block.b_mlp2.data
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_single_token_reduces_to_linear(self):
        block = init_vit_block(4, 2, seed=8)
        x = np.random.default_rng(6).normal(size=(1, 1, 4))
        got = vit_block_forward(block, Tensor(x)).data
        ref = np_msa(np_ln(x, block.ln1.gamma.data, block.ln1.beta.data), block)
        # with one token, softmax over one key is 1 -> value path only
        xt = np_ln(x, block.ln1.gamma.data, block.ln1.beta.data)
        direct = (xt @ block.wv.data.T + block.bv.data) @ block.wo.data.T + block.bo.data
        np.testing.assert_allclose(ref, direct, atol=1e-12)
        assert got.shape == x.shape


class TestInit:
    def test_deterministic_per_seed(self):
        a = init_basic_block(4, seed=11)
        b = init_basic_block(4, seed=11)
        for (pid_a, pa), (pid_b, pb) in zip(a.named_params(), b.named_params()):
            assert pid_a == pid_b
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_gamma_one_beta_zero(self):
        block = init_bottleneck_block(8, 2, seed=12)
        for bn in (block.bn1, block.bn2, block.bn3):
            np.testing.assert_array_equal(bn.gamma.data, 1.0)
            np.testing.assert_array_equal(bn.beta.data, 0.0)
        vit = init_vit_block(8, 2, seed=12)
        np.testing.assert_array_equal(vit.ln1.gamma.data, 1.0)
        np.testing.assert_array_equal(vit.ln2.beta.data, 0.0)

    def test_kaiming_std_within_20pct(self):
        c, q = 16, 3
        fan_in = c * q * q
        target = math.sqrt(2.0 / fan_in)
        stds = [init_basic_block(c, seed=s).conv1.data.std() for s in range(10)]
        assert abs(np.mean(stds) - target) / target < 0.2

    def test_dispatcher(self):
        block = init_block("vit", seed=1, d=8, heads=2)
        assert block.kind == "vit"
        with pytest.raises(ValueError, match="kind"):
            init_block("dense", seed=0)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            init_basic_block(4, q=4, seed=0)


@pytest.mark.parametrize("seed", range(3))
def test_block_forwards_differentiable(seed):
    rng = np.random.default_rng(seed + 40)

    block = init_basic_block(4, seed=seed)
    x = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
    f = lambda z: tsum(basic_block_forward(block, z, "train") ** 2)
    assert grad_check(f, x, h=1e-5) < 1e-5

    vit = init_vit_block(8, 2, mlp_ratio=2, seed=seed)
    xt = Tensor(rng.normal(size=(1, 3, 8)), requires_grad=True)
    g = lambda z: tsum(vit_block_forward(vit, z) ** 2)
    assert grad_check(g, xt, h=1e-5) < 1e-5
