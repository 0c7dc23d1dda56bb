import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from replab.blocks import init_basic_block, init_bottleneck_block, init_vit_block
from replab.replacement import (
    ComputingViT,
    SynthCoeffs,
    computing_basic_forward,
    computing_bottleneck_forward,
    computing_vit_attn_forward,
    computing_vit_forward,
    computing_vit_mlp_forward,
    freeze_layer_anchors,
    init_coeffs,
    make_computing_basic,
    make_computing_bottleneck,
    make_computing_vit,
    normalize_conv_kernel,
    normalize_linear_rows,
    synth_basic_kernel,
    synth_vit_mlp,
    synth_vit_proj,
)
from replab.tensor import Parameter, ShapeError, Tensor, backward, grad_check, tsum


def coeffs_of(alpha, beta):
    a = np.atleast_1d(np.asarray(alpha, dtype=float))
    return SynthCoeffs(Tensor(a), Tensor(np.atleast_1d(np.asarray(beta, dtype=float))))


class TestNormalization:
    def test_conv_hand_norm(self):
        w = Tensor(np.array([3.0, 0.0, 0.0, 4.0]).reshape(1, 1, 2, 2))
        out = normalize_conv_kernel(w, eps=1e-12)
        np.testing.assert_allclose(out.data.ravel(), [0.6, 0.0, 0.0, 0.8], atol=1e-9)

    def test_zero_channel_stays_zero(self):
        w = Tensor(np.zeros((2, 1, 3, 3)))
        out = normalize_conv_kernel(w, eps=1e-5)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_unit_norm_nearly_fixed(self):
        w = np.zeros((1, 1, 2, 2))
        w[0, 0] = [[0.6, 0.0], [0.0, 0.8]]
        out = normalize_conv_kernel(Tensor(w), eps=1e-5)
        assert np.abs(out.data - w).max() < 5e-6

    def test_rows_hand_norm(self):
        out = normalize_linear_rows(Tensor(np.array([[3.0, 4.0]])), eps=1e-12)
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-9)

    def test_zero_row_stays_zero(self):
        out = normalize_linear_rows(Tensor(np.zeros((3, 4))), eps=1e-5)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_identity_nearly_fixed(self):
        out = normalize_linear_rows(Tensor(np.eye(4)), eps=1e-7)
        np.testing.assert_allclose(out.data, np.eye(4), atol=1e-6)

    def test_bad_eps(self):
        with pytest.raises(ValueError, match="eps"):
            normalize_conv_kernel(Tensor(np.zeros((1, 1, 1, 1))), eps=0.0)

    @pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
    def test_scale_covariance(self, c):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(3, 2, 3, 3))
        base = normalize_conv_kernel(Tensor(w), eps=1e-5).data
        scaled = normalize_conv_kernel(Tensor(c * w), eps=1e-5).data
        assert np.abs(base - scaled).max() < 1e-6


class TestKernelSynthesis:
    def test_alpha_only(self):
        rng = np.random.default_rng(1)
        wp = Tensor(rng.normal(size=(2, 2, 3, 3)))
        wn = Tensor(rng.normal(size=(2, 2, 3, 3)))
        out = synth_basic_kernel(wp, wn, coeffs_of([1.0, 1.0], [0.0, 0.0]))
        np.testing.assert_allclose(out.data, normalize_conv_kernel(wp).data, atol=1e-15)

    def test_symmetric_mix_of_equal_anchors(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(2, 1, 3, 3))
        out = synth_basic_kernel(Tensor(w), Tensor(w.copy()),
                                 coeffs_of([0.5, 0.5], [0.5, 0.5]))
        np.testing.assert_allclose(out.data, normalize_conv_kernel(Tensor(w)).data, atol=1e-15)

    def test_hand_mix(self):
        # prev normalized [0.6,0,0,0.8], next normalized [0,1,0,0], both halves
        wp = np.array([3.0, 0.0, 0.0, 4.0]).reshape(1, 1, 2, 2)
        wn = np.array([0.0, 5.0, 0.0, 0.0]).reshape(1, 1, 2, 2)
        out = synth_basic_kernel(Tensor(wp), Tensor(wn), coeffs_of([0.5], [0.5]), eps=1e-14)
        np.testing.assert_allclose(out.data.ravel(), [0.3, 0.5, 0.0, 0.4], atol=1e-9)

    def test_anchor_shape_mismatch(self):
        with pytest.raises(ShapeError, match="anchor"):
            synth_basic_kernel(Tensor(np.zeros((2, 2, 3, 3))),
                               Tensor(np.zeros((2, 2, 5, 5))), coeffs_of([1, 1], [0, 0]))


class TestProjectionSynthesis:
    def test_scalar_alpha_one(self):
        rng = np.random.default_rng(3)
        wp, wn = Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4)))
        bp, bn = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
        w, b = synth_vit_proj(wp, wn, bp, bn, coeffs_of([1.0], [0.0]), mode="scalar")
        np.testing.assert_allclose(w.data, wp.data, atol=1e-15)
        np.testing.assert_allclose(b.data, bp.data, atol=1e-15)

    def test_headwise_bias_average(self):
        wp = Tensor(np.eye(2))
        w, b = synth_vit_proj(wp, wp, Tensor([1.0, 3.0]), Tensor([3.0, 1.0]),
                              coeffs_of([1.0], [0.0]), mode="headwise", heads=1)
        np.testing.assert_allclose(b.data, [2.0, 2.0], atol=1e-15)

    def test_headwise_column_selection(self):
        rng = np.random.default_rng(4)
        d, heads = 4, 2
        wp, wn = rng.normal(size=(d, d)), rng.normal(size=(d, d))
        w, _ = synth_vit_proj(Tensor(wp), Tensor(wn), Tensor(np.zeros(d)), Tensor(np.zeros(d)),
                              coeffs_of([1.0, 0.0], [0.0, 1.0]), mode="headwise", heads=heads)
        np_p = normalize_linear_rows(Tensor(wp)).data
        np_n = normalize_linear_rows(Tensor(wn)).data
        np.testing.assert_allclose(w.data[:, :2], np_p[:, :2], atol=1e-12)
        np.testing.assert_allclose(w.data[:, 2:], np_n[:, 2:], atol=1e-12)

    def test_headwise_divisibility(self):
        w = Tensor(np.zeros((6, 6)))
        b = Tensor(np.zeros(6))
        with pytest.raises(ShapeError, match="divisible"):
            synth_vit_proj(w, w, b, b, coeffs_of([1.0] * 4, [0.0] * 4), mode="headwise", heads=4)


class TestMlpSynthesis:
    def test_identical_neighbors(self):
        rng = np.random.default_rng(5)
        m1, m2 = rng.normal(size=(8, 4)), rng.normal(size=(4, 8))
        b1, b2 = rng.normal(size=8), rng.normal(size=4)
        w1, bb1, w2, bb2 = synth_vit_mlp(Tensor(m1), Tensor(b1), Tensor(m2), Tensor(b2),
                                         Tensor(m1.copy()), Tensor(b1.copy()),
                                         Tensor(m2.copy()), Tensor(b2.copy()))
        np.testing.assert_allclose(w1.data, normalize_linear_rows(Tensor(m1)).data, atol=1e-15)
        np.testing.assert_allclose(bb1.data, b1, atol=1e-15)
        np.testing.assert_allclose(w2.data, normalize_linear_rows(Tensor(m2)).data, atol=1e-15)

    def test_bias_average(self):
        z = Tensor(np.zeros((1, 1)))
        _, b1, _, _ = synth_vit_mlp(z, Tensor([2.0]), z, Tensor([0.0]),
                                    z, Tensor([0.0]), z, Tensor([0.0]))
        np.testing.assert_allclose(b1.data, [1.0], atol=1e-15)

    def test_normalize_then_halve(self):
        wa = Tensor(np.array([[3.0, 4.0]]))
        wb = Tensor(np.zeros((1, 2)))
        w1, _, _, _ = synth_vit_mlp(wa, Tensor([0.0]), Tensor(np.zeros((2, 1))), Tensor(np.zeros(2)),
                                    wb, Tensor([0.0]), Tensor(np.zeros((2, 1))), Tensor(np.zeros(2)),
                                    eps=1e-14)
        np.testing.assert_allclose(w1.data, [[0.3, 0.4]], atol=1e-7)

    def test_dff_mismatch(self):
        with pytest.raises(ShapeError, match="dff|disagree"):
            synth_vit_mlp(Tensor(np.zeros((8, 4))), Tensor(np.zeros(8)),
                          Tensor(np.zeros((4, 8))), Tensor(np.zeros(4)),
                          Tensor(np.zeros((6, 4))), Tensor(np.zeros(6)),
                          Tensor(np.zeros((4, 6))), Tensor(np.zeros(4)))


def make_basic_site(seed=0, c=4):
    prev = init_basic_block(c, prefix="prev", seed=seed)
    nxt = init_basic_block(c, prefix="next", seed=seed + 1)
    layer = make_computing_basic(prev, nxt, "g")
    return prev, nxt, layer


class TestComputingBasic:
    def test_dead_branch_is_relu(self):
        _, _, layer = make_basic_site()
        layer.coeffs.alpha.data[:] = 0.0
        layer.coeffs.beta.data[:] = 0.0
        x = Tensor(np.random.default_rng(0).normal(size=(2, 4, 5, 5)))
        out = computing_basic_forward(layer, x, "train")
        np.testing.assert_allclose(out.data, np.maximum(x.data, 0.0), atol=1e-15)

    def test_anchor_gradients_blocked(self):
        prev, nxt, layer = make_basic_site(seed=2)
        x = Tensor(np.random.default_rng(1).normal(size=(1, 4, 4, 4)))
        loss = tsum(computing_basic_forward(layer, x, "train") ** 2)
        grads = backward(loss, [prev.conv2, nxt.conv1, layer.coeffs.alpha])
        np.testing.assert_array_equal(grads["prev.conv2"], 0.0)
        np.testing.assert_array_equal(grads["next.conv1"], 0.0)
        assert np.abs(grads["g.alpha"]).max() > 0.0

    def test_two_path_equivalence(self):
        prev, nxt, layer = make_basic_site(seed=3)
        rng = np.random.default_rng(2)
        layer.coeffs.alpha.data[:] = rng.normal(size=4)
        layer.coeffs.beta.data[:] = rng.normal(size=4)
        x = rng.normal(size=(2, 4, 5, 5))
        got = computing_basic_forward(layer, Tensor(x), "train").data

        # oracle: materialize the kernel explicitly, then run conv/bn/relu
        from replab.tensor import batch_norm, conv2d, relu

        w = layer.synthesized()
        bn_mean = Tensor(layer.bn.mean.data.copy())
        bn_var = Tensor(layer.bn.var.data.copy())
        y = batch_norm(conv2d(Tensor(x), Tensor(w.data.copy()), 1, 1),
                       layer.bn.gamma, layer.bn.beta, bn_mean, bn_var, training=True)
        ref = relu(Tensor(x) + y).data
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_resynthesis_freshness(self):
        prev, _, layer = make_basic_site(seed=4)
        x = Tensor(np.random.default_rng(3).normal(size=(1, 4, 4, 4)))
        before = computing_basic_forward(layer, x, "eval").data.copy()
        prev.conv2.data = prev.conv2.data + 1.0
        after = computing_basic_forward(layer, x, "eval").data
        assert np.abs(before - after).max() > 1e-6

    def test_coefficient_liveness_finite_differences(self):
        _, _, layer = make_basic_site(seed=5)
        x = Tensor(np.random.default_rng(4).normal(size=(1, 4, 4, 4)))
        f = lambda a: tsum(computing_basic_forward(layer, x, "eval") ** 2)
        assert grad_check(f, layer.coeffs.alpha, h=1e-5) < 1e-5
        assert grad_check(f, layer.coeffs.beta, h=1e-5) < 1e-5


def make_bottleneck_site(seed=0, c=8, b=2):
    prev = init_bottleneck_block(c, b, prefix="prev", seed=seed)
    nxt = init_bottleneck_block(c, b, prefix="next", seed=seed + 1)
    layer = make_computing_bottleneck(prev, nxt, "g")
    return prev, nxt, layer


class TestComputingBottleneck:
    def test_zero_expansion_anchor_is_relu(self):
        _, nxt, layer = make_bottleneck_site()
        nxt.conv_exp.data = np.zeros_like(nxt.conv_exp.data)
        x = Tensor(np.random.default_rng(0).normal(size=(1, 8, 4, 4)))
        out = computing_bottleneck_forward(layer, x, "train")
        np.testing.assert_allclose(out.data, np.maximum(x.data, 0.0), atol=1e-15)

    def test_grads_only_to_coeffs_and_bn(self):
        prev, nxt, layer = make_bottleneck_site(seed=1)
        x = Tensor(np.random.default_rng(1).normal(size=(1, 8, 4, 4)))
        loss = tsum(computing_bottleneck_forward(layer, x, "train") ** 2)
        watched = [prev.conv_red, prev.conv_mid, nxt.conv_mid, nxt.conv_exp,
                   layer.coeffs.alpha, layer.bn.gamma]
        grads = backward(loss, watched)
        for pid in ("prev.conv_red", "prev.conv_mid", "next.conv_mid", "next.conv_exp"):
            np.testing.assert_array_equal(grads[pid], 0.0)
        assert np.abs(grads["g.alpha"]).max() > 0.0
        assert np.abs(grads["g.bn.gamma"]).max() > 0.0

    def test_two_path_equivalence(self):
        prev, nxt, layer = make_bottleneck_site(seed=2)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 8, 4, 4))
        got = computing_bottleneck_forward(layer, Tensor(x), "train").data

        from replab.tensor import batch_norm, conv2d, relu

        wmid = Tensor(layer.synthesized_mid().data.copy())
        z1 = relu(conv2d(Tensor(x), Tensor(prev.conv_red.data.copy()), 1, 0))
        z2 = relu(conv2d(z1, wmid, 1, 1))
        y = batch_norm(conv2d(z2, Tensor(nxt.conv_exp.data.copy()), 1, 0),
                       layer.bn.gamma, layer.bn.beta,
                       Tensor(layer.bn.mean.data.copy()), Tensor(layer.bn.var.data.copy()),
                       training=True)
        ref = relu(Tensor(x) + y).data
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_width_mismatch_raises(self):
        _, _, layer = make_bottleneck_site(seed=3)
        with pytest.raises(ShapeError, match="width"):
            computing_bottleneck_forward(layer, Tensor(np.zeros((1, 4, 4, 4))), "eval")


def make_vit_site(seed=0, d=8, heads=2, **kw):
    prev = init_vit_block(d, heads, mlp_ratio=2, prefix="prev", seed=seed)
    nxt = init_vit_block(d, heads, mlp_ratio=2, prefix="next", seed=seed + 1)
    layer = make_computing_vit(prev, nxt, "g", **kw)
    return prev, nxt, layer


class TestComputingViT:
    def test_zero_synthesized_is_identity(self):
        prev, nxt, layer = make_vit_site(synth_mode="scalar", use_mlp=False)
        for p in (prev.wo, prev.bo, nxt.wo, nxt.bo):
            p.data = np.zeros_like(p.data)
        x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 8)))
        out = computing_vit_attn_forward(layer, x)
        np.testing.assert_allclose(out.data, x.data, atol=1e-15)

    def test_scalar_hand_arithmetic(self):
        prev = init_vit_block(1, 1, prefix="p", seed=0)
        nxt = init_vit_block(1, 1, prefix="n", seed=1)
        prev.wo.data = np.array([[0.5]])
        prev.bo.data = np.array([1.0])
        layer = make_computing_vit(prev, nxt, "g", synth_mode="scalar", use_mlp=False)
        layer.attn_coeffs.alpha.data[:] = 1.0
        layer.attn_coeffs.beta.data[:] = 0.0
        out = computing_vit_attn_forward(layer, Tensor(np.array([[[2.0]]])))
        assert out.data[0, 0, 0] == pytest.approx(4.0, abs=1e-12)

    def test_headwise_scale_is_half_at_d4(self):
        prev, nxt, layer = make_vit_site(seed=3, d=4, heads=2, synth_mode="headwise",
                                         use_mlp=False)
        rng = np.random.default_rng(1)
        prev.bo.data = rng.normal(size=4)
        nxt.bo.data = rng.normal(size=4)
        bias = 0.5 * (prev.bo.data + nxt.bo.data)
        x = rng.normal(size=(1, 2, 4))
        out = computing_vit_attn_forward(layer, Tensor(x)).data
        layer_unscaled = ComputingViT(
            attn_coeffs=layer.attn_coeffs, use_attn=True, use_mlp=False,
            synth_mode="headwise", scale_mode="none", heads=2, anchors=layer.anchors)
        out_unscaled = computing_vit_attn_forward(layer_unscaled, Tensor(x)).data
        # d = 4 halves the matmul term; the bias is added unscaled
        np.testing.assert_allclose(out - x - bias, 0.5 * (out_unscaled - x - bias),
                                   atol=1e-12)

    def test_mlp_zero_second_layer_is_identity(self):
        prev, nxt, layer = make_vit_site(seed=4, use_attn=False)
        for blk in (prev, nxt):
            blk.mlp2.data = np.zeros_like(blk.mlp2.data)
            blk.b_mlp2.data = np.zeros_like(blk.b_mlp2.data)
        x = Tensor(np.random.default_rng(2).normal(size=(2, 3, 8)))
        out = computing_vit_mlp_forward(layer, x)
        np.testing.assert_allclose(out.data, x.data, atol=1e-15)

    def test_mlp_two_path_equivalence(self):
        prev, nxt, layer = make_vit_site(seed=5, use_attn=False)
        x = np.random.default_rng(3).normal(size=(2, 3, 8))
        got = computing_vit_mlp_forward(layer, Tensor(x)).data

        from replab.tensor import gelu, layer_norm, linear

        w1, b1, w2, b2 = (Tensor(v.data.copy()) for v in layer_mlp_weights(layer))
        xt = layer_norm(Tensor(x), prev.ln2.gamma, prev.ln2.beta)
        ref = (Tensor(x) + linear(gelu(linear(xt, w1, b1)), w2, b2)).data
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_mlp_zero_input_bias_broadcast(self):
        prev, nxt, layer = make_vit_site(seed=6, use_attn=False)
        for blk in (prev, nxt):
            blk.ln2.beta.data = np.zeros_like(blk.ln2.beta.data)
            blk.ln2.gamma.data = np.zeros_like(blk.ln2.gamma.data)
            blk.b_mlp1.data = np.zeros_like(blk.b_mlp1.data)
            blk.b_mlp2.data = np.full_like(blk.b_mlp2.data, 0.75)
        out = computing_vit_mlp_forward(layer, Tensor(np.zeros((1, 2, 8))))
        np.testing.assert_allclose(out.data, 0.75, atol=1e-12)

    def test_flag_composition(self):
        _, _, both = make_vit_site(seed=7)
        x = Tensor(np.random.default_rng(4).normal(size=(1, 3, 8)))
        neither = ComputingViT(attn_coeffs=None, use_attn=False, use_mlp=False,
                               synth_mode="headwise", scale_mode="inv_sqrt_d",
                               heads=2, anchors=both.anchors)
        np.testing.assert_array_equal(computing_vit_forward(neither, x).data, x.data)

        attn_only = ComputingViT(attn_coeffs=both.attn_coeffs, use_attn=True, use_mlp=False,
                                 synth_mode="headwise", scale_mode="inv_sqrt_d",
                                 heads=2, anchors=both.anchors)
        np.testing.assert_array_equal(
            computing_vit_forward(attn_only, x).data,
            computing_vit_attn_forward(attn_only, x).data)

        full = computing_vit_forward(both, x).data
        staged = computing_vit_mlp_forward(both, computing_vit_attn_forward(both, x)).data
        np.testing.assert_array_equal(full, staged)

    def test_anchor_gradients_blocked_vit(self):
        prev, nxt, layer = make_vit_site(seed=8)
        x = Tensor(np.random.default_rng(5).normal(size=(1, 3, 8)))
        loss = tsum(computing_vit_forward(layer, x) ** 2)
        grads = backward(loss, [prev.wo, nxt.wo, prev.mlp1, prev.ln1.gamma,
                                layer.attn_coeffs.alpha])
        for pid in ("prev.wo", "next.wo", "prev.mlp1", "prev.ln1.gamma"):
            np.testing.assert_array_equal(grads[pid], 0.0)
        assert np.abs(grads["g.alpha"]).max() > 0.0


def layer_mlp_weights(layer):
    return synth_vit_mlp(
        layer.anchors["mlp1_prev"], layer.anchors["b_mlp1_prev"],
        layer.anchors["mlp2_prev"], layer.anchors["b_mlp2_prev"],
        layer.anchors["mlp1_next"], layer.anchors["b_mlp1_next"],
        layer.anchors["mlp2_next"], layer.anchors["b_mlp2_next"])


class TestCoeffVariants:
    def test_tied_mode_effective_beta(self):
        c = init_coeffs(3, "g", neighbors="both", coeff_mode="one")
        c.alpha.data[:] = 0.3
        a, b = c.effective()
        np.testing.assert_allclose(b.data, 0.7, atol=1e-15)
        assert [pid for pid, _ in c.named_params()] == ["g.alpha"]

    def test_prev_only_freezes_beta(self):
        c = init_coeffs(2, "g", neighbors="prev_only")
        _, b = c.effective()
        np.testing.assert_array_equal(b.data, 0.0)
        assert [pid for pid, _ in c.named_params()] == ["g.alpha"]

    def test_next_only_freezes_alpha(self):
        c = init_coeffs(2, "g", neighbors="next_only")
        a, _ = c.effective()
        np.testing.assert_array_equal(a.data, 0.0)
        assert [pid for pid, _ in c.named_params()] == ["g.beta"]

    def test_tied_requires_both(self):
        with pytest.raises(ValueError, match="both"):
            init_coeffs(1, "g", neighbors="prev_only", coeff_mode="one")

    def test_tied_gradient_flows(self):
        prev, nxt, layer = make_basic_site(seed=9)
        layer.coeffs = init_coeffs(4, "g", coeff_mode="one")
        x = Tensor(np.random.default_rng(6).normal(size=(1, 4, 4, 4)))
        f = lambda a: tsum(computing_basic_forward(layer, x, "eval") ** 2)
        assert grad_check(f, layer.coeffs.alpha, h=1e-5) < 1e-5


class TestFreezeAnchors:
    def test_frozen_layer_ignores_anchor_mutation(self):
        prev, _, layer = make_basic_site(seed=10)
        frozen = freeze_layer_anchors(layer)
        x = Tensor(np.random.default_rng(7).normal(size=(1, 4, 4, 4)))
        before = computing_basic_forward(frozen, x, "eval").data.copy()
        prev.conv2.data = prev.conv2.data + 5.0
        after = computing_basic_forward(frozen, x, "eval").data
        np.testing.assert_array_equal(before, after)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 10.0), st.integers(0, 10))
def test_scale_covariance_property(scale, seed):
    # normalize(cW) == normalize(W) up to eps terms; the per-channel gap is
    # bounded by |1/sqrt(s^2 n^2 + eps) - 1/(s n)| * ||sW_c|| via the exact
    # unit normalization, applied once per side of the triangle inequality.
    eps = 1e-5
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(2, 2, 3, 3))
    a = normalize_conv_kernel(Tensor(w), eps=eps).data
    b = normalize_conv_kernel(Tensor(scale * w), eps=eps).data
    for c in range(w.shape[0]):
        n = np.linalg.norm(w[c])
        bound = (abs(1 / math.sqrt((scale * n) ** 2 + eps) - 1 / (scale * n)) * scale * n
                 + abs(1 / math.sqrt(n**2 + eps) - 1 / n) * n)
        assert np.linalg.norm(a[c] - b[c]) <= bound * 1.0000001 + 1e-15
