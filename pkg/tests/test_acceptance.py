"""Acceptance suite: one test per exit criterion, one printed line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
pass lines.
"""

import time

import numpy as np
import pytest

from replab.analysis import best_fit_coeffs, projection_output_error, telescoped_deviation
from replab.blocks import init_basic_block, init_bottleneck_block, init_vit_block
from replab.builder import (
    NetworkSpec,
    StageSpec,
    build_network,
    build_pair,
    freeze_anchors,
    removal_set,
)
from replab.cost import cost_report, param_count_block, param_count_network, vit_eta_formula
from replab.deploy import equivalence_check, export_deploy, fold_bn_conv
from replab.harness.checkpoint import checkpoint_load, checkpoint_save
from replab.harness.config import parse_config
from replab.harness.data import load_dataset
from replab.harness.experiment import run_cell
from replab.harness.metrics import read_metrics, records_equal
from replab.replacement import (
    make_computing_basic,
    make_computing_bottleneck,
    make_computing_vit,
)
from replab.tensor import Tensor, backward, batch_norm, conv2d, cross_entropy_loss, grad_check, tsum
from replab.trainer import evaluate, make_optimizer, train_epoch


def _report(num, text):
    print(f"[criterion {num:>2}] PASS {text}")


def cnn_spec(**kw):
    base = dict(family="resnet_basic", stages=[StageSpec(5, 8)], num_classes=4,
                in_channels=1, image_size=8, K=4, method="repl")
    base.update(kw)
    return NetworkSpec(**base)


def vit_spec(**kw):
    base = dict(family="vit", stages=[StageSpec(5, 8)], num_classes=4,
                in_channels=1, image_size=8, patch_size=4, vit_heads=2,
                vit_mlp_ratio=2, K=4, method="repl")
    base.update(kw)
    return NetworkSpec(**base)


# -- criterion 1: gradient correctness ---------------------------------------

def _variant_cases(seed):
    """(name, loss thunk, leaves) per variant; thunks re-read the leaves live."""
    rng = np.random.default_rng(seed)
    x_img = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
    x_tok = Tensor(rng.normal(size=(1, 4, 8)), requires_grad=True)

    cases = []

    basic = init_basic_block(4, prefix="fb", seed=seed)
    cases.append(("block_basic", lambda: tsum(basic.forward(x_img, "train") ** 2),
                  [x_img, basic.conv1, basic.conv2, basic.bn1.gamma]))

    bott = init_bottleneck_block(4, 2, prefix="fo", seed=seed)
    cases.append(("block_bottleneck", lambda: tsum(bott.forward(x_img, "train") ** 2),
                  [x_img, bott.conv_red, bott.conv_mid, bott.conv_exp]))

    vit = init_vit_block(8, 2, mlp_ratio=2, prefix="fv", seed=seed)
    cases.append(("block_vit", lambda: tsum(vit.forward(x_tok) ** 2),
                  [x_tok, vit.wo, vit.mlp1, vit.ln1.gamma]))

    prev_b = init_basic_block(4, prefix="pb", seed=seed + 50)
    next_b = init_basic_block(4, prefix="nb", seed=seed + 51)
    layer_b = make_computing_basic(prev_b, next_b, "gb")
    cases.append(("computing_basic", lambda: tsum(layer_b.forward(x_img, "train") ** 2),
                  [x_img, layer_b.coeffs.alpha, layer_b.coeffs.beta, layer_b.bn.gamma]))

    prev_o = init_bottleneck_block(4, 2, prefix="po", seed=seed + 60)
    next_o = init_bottleneck_block(4, 2, prefix="no", seed=seed + 61)
    layer_o = make_computing_bottleneck(prev_o, next_o, "go")
    cases.append(("computing_bottleneck", lambda: tsum(layer_o.forward(x_img, "train") ** 2),
                  [x_img, layer_o.coeffs.alpha, layer_o.coeffs.beta, layer_o.bn.gamma]))

    prev_v = init_vit_block(8, 2, mlp_ratio=2, prefix="pv", seed=seed + 70)
    next_v = init_vit_block(8, 2, mlp_ratio=2, prefix="nv", seed=seed + 71)

    layer_s = make_computing_vit(prev_v, next_v, "gs", synth_mode="scalar", use_mlp=False)
    cases.append(("computing_vit_scalar", lambda: tsum(layer_s.forward(x_tok) ** 2),
                  [x_tok, layer_s.attn_coeffs.alpha, layer_s.attn_coeffs.beta]))

    layer_h = make_computing_vit(prev_v, next_v, "gh", synth_mode="headwise", use_mlp=False)
    cases.append(("computing_vit_headwise", lambda: tsum(layer_h.forward(x_tok) ** 2),
                  [x_tok, layer_h.attn_coeffs.alpha, layer_h.attn_coeffs.beta]))

    layer_m = make_computing_vit(prev_v, next_v, "gm", synth_mode="headwise", use_mlp=True)
    cases.append(("computing_vit_with_mlp", lambda: tsum(layer_m.forward(x_tok) ** 2),
                  [x_tok, layer_m.attn_coeffs.alpha, layer_m.attn_coeffs.beta]))

    return cases


def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        for name, thunk, leaves in _variant_cases(seed):
            for leaf in leaves:
                err = grad_check(lambda _: thunk(), leaf, h=1e-5)
                worst = max(worst, err)
                assert err < 1e-5, f"{name} seed {seed}: grad error {err:.2e}"
    elapsed = time.perf_counter() - start
    assert elapsed < 120.0
    _report(1, f"grad_check over 8 variants x 5 seeds, worst {worst:.2e}, {elapsed:.1f}s")


# -- criterion 2: anchor opacity ----------------------------------------------

def test_criterion_2_anchor_opacity():
    worst = 0.0
    for spec, shape in ((cnn_spec(), (4, 1, 8, 8)), (vit_spec(), (4, 1, 8, 8))):
        net = build_network(spec, seed=2)
        twin = freeze_anchors(net)
        rng = np.random.default_rng(2)
        for _ in range(10):
            x = rng.normal(size=shape)
            labels = rng.integers(0, spec.num_classes, size=shape[0])
            g_live = backward(cross_entropy_loss(net.forward(Tensor(x), "train"), labels),
                              net.registry.params)
            g_frozen = backward(cross_entropy_loss(twin.forward(Tensor(x), "train"), labels),
                                twin.registry.params)
            assert g_live.keys() == g_frozen.keys()
            for pid in g_live:
                diff = float(np.abs(g_live[pid] - g_frozen[pid]).max())
                worst = max(worst, diff)
                assert diff <= 1e-12, f"{pid}: {diff:.2e}"
    _report(2, f"frozen-anchor twin GradMaps match on 10 batches x 2 families, worst {worst:.2e}")


# -- criterion 3: exact parameter accounting ----------------------------------

def test_criterion_3_exact_parameter_accounting():
    basic = cnn_spec(stages=[StageSpec(5, 16)])
    p, a = param_count_block(basic, basic.stages[0])
    assert (p, a) == (4672, 64)

    bott = cnn_spec(family="resnet_bottleneck", stages=[StageSpec(5, 256, mid=64)])
    p2, a2 = param_count_block(bott, bott.stages[0])
    assert (p2, a2) == (70400, 640) and p2 - a2 == 69760

    checked = 0
    for spec in (basic, bott, vit_spec(), cnn_spec(stages=[StageSpec(6, 8), StageSpec(6, 16)],
                                                   image_size=8)):
        for method in ("e2e", "repl"):
            import dataclasses

            counts = param_count_network(build_network(dataclasses.replace(spec, method=method), seed=3))
            assert counts["analytic"] == counts["walked"]
            checked += 1
    _report(3, f"analytic == registry walk for {checked} nets; pinned (P,a) values hold")


# -- criterion 4: FLOP ratios --------------------------------------------------

def test_criterion_4_flop_ratios():
    report = cost_report(cnn_spec(), seed=0)
    assert report.sites and all(s.eta == 0.5 for s in report.sites)

    spec = vit_spec(stages=[StageSpec(5, 32)], image_size=32, patch_size=4,
                    vit_heads=4, vit_mlp_ratio=4, vit_synth="scalar",
                    vit_use_attn=True, vit_use_mlp=False)
    assert spec.tokens() == 64
    vit_report = cost_report(spec, seed=0)
    formula = vit_eta_formula(64, 32)
    assert formula == pytest.approx(0.0625)
    measured = vit_report.sites[0].eta
    assert abs(measured - formula) / formula < 0.05
    _report(4, f"eta_basic == 1/2 exactly; vit eta measured {measured:.6f} vs formula 0.0625")


# -- criterion 5: removal plans -------------------------------------------------

def test_criterion_5_removal_plans():
    assert removal_set(12, 4) == {4, 8}
    assert removal_set(4, 4) == set()
    assert removal_set(13, 4) == {4, 8, 12}

    spec = cnn_spec(stages=[StageSpec(6, 4), StageSpec(6, 8)], image_size=8)
    net = build_network(spec, seed=0)
    for site in net.sites:
        layer = dict(net.units)[site.layer_name]
        for anchor in layer.anchors.values():
            assert anchor.pid.startswith(f"s{site.stage}.")  # no cross-stage anchors

    e2e = build_network(cnn_spec(method="e2e"), seed=5)
    huge_k = build_network(cnn_spec(K=10**9), seed=5)
    assert [n for n, _ in e2e.units] == [n for n, _ in huge_k.units]
    x = Tensor(np.random.default_rng(5).normal(size=(2, 1, 8, 8)))
    np.testing.assert_array_equal(e2e.forward(x, "eval").data, huge_k.forward(x, "eval").data)
    _report(5, "removal sets match enumeration; sites stay in-stage; K->inf is operator-identical")


# -- criterion 6: deploy equivalence -------------------------------------------

def _warm(spec, seed=0):
    net = build_network(spec, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for _ in range(3):
        net.forward(Tensor(rng.normal(size=(4, spec.in_channels, spec.image_size,
                                             spec.image_size))), "train")
    return net


def test_criterion_6_deploy_equivalence():
    rng = np.random.default_rng(6)
    results = {}
    for label, spec in (("cnn", cnn_spec()), ("vit", vit_spec())):
        net = _warm(spec)
        deploy = export_deploy(net)
        inputs = [rng.normal(size=(10, 1, 8, 8)) for _ in range(10)]  # 100 inputs
        diff = equivalence_check(net, deploy, inputs)
        assert diff <= 1e-12, f"{label}: {diff:.2e}"
        results[label] = diff

        net32 = _warm(spec, seed=1).cast(np.float32)
        deploy32 = export_deploy(net32)
        inputs32 = [x.astype(np.float32) for x in inputs]
        diff32 = equivalence_check(net32, deploy32, inputs32)
        assert diff32 <= 1e-5, f"{label} fp32: {diff32:.2e}"
        results[label + "_fp32"] = diff32

    for _ in range(10):
        w = rng.normal(size=(3, 2, 3, 3))
        gamma, beta = rng.normal(size=3), rng.normal(size=3)
        mean, var = rng.normal(size=3), rng.uniform(0.05, 3.0, size=3)
        x = rng.normal(size=(2, 2, 6, 6))
        dyn = batch_norm(conv2d(Tensor(x), Tensor(w), 1, 1), Tensor(gamma), Tensor(beta),
                         Tensor(mean), Tensor(var), training=False).data
        wd, bd = fold_bn_conv(w, None, gamma, beta, mean, var)
        folded = conv2d(Tensor(x), Tensor(wd), 1, 1).data + bd.reshape(1, -1, 1, 1)
        assert np.abs(dyn - folded).max() <= 1e-12
    _report(6, "dynamic vs deploy: " + ", ".join(f"{k} {v:.1e}" for k, v in results.items()))


# -- criterion 7: recoverability -------------------------------------------------

def test_criterion_7_recoverability():
    rng = np.random.default_rng(7)
    wp, wn = rng.normal(size=(6, 6)), rng.normal(size=(6, 6))
    target = 0.3 * wp + 0.7 * wn
    fit = best_fit_coeffs(target, wp, wn)
    assert fit.residual <= 1e-10
    assert abs(fit.alpha_star[0] - 0.3) <= 1e-8 and abs(fit.beta_star[0] - 0.7) <= 1e-8

    w = rng.normal(size=(4, 4))
    deficient = best_fit_coeffs(w, w, w.copy())
    assert deficient.rank_deficient
    assert abs(deficient.alpha_star[0] - 0.5) <= 1e-10
    assert abs(deficient.beta_star[0] - 0.5) <= 1e-10

    w_hat = fit.alpha_star[0] * wp + fit.beta_star[0] * wn
    x = rng.normal(size=(3, 5, 6))
    err, bound = projection_output_error(x, target, w_hat)
    assert err <= 1e-10 and err <= bound + 1e-12
    _report(7, f"planted (0.3,0.7) recovered (residual {fit.residual:.1e}); "
               f"min-norm (0.5,0.5); token-wise error {err:.1e}")


# -- criterion 8: telescoping deviation ------------------------------------------

def test_criterion_8_telescoping_deviation():
    spec = cnn_spec(stages=[StageSpec(6, 8)], K=2, image_size=4)  # sites {2, 4}
    e2e, repl = build_pair(spec, seed=8)
    assert 1 <= len(repl.sites) <= 3 and spec.depth <= 6
    inputs = np.random.default_rng(8).normal(size=(100, 1, 4, 4))
    report = telescoped_deviation(e2e, repl, inputs)
    totals = report.per_sample_steps.sum(axis=1)
    assert np.all(report.measured <= totals + 1e-9)
    assert report.max_measured <= report.bound_rhs + 1e-9
    _report(8, f"triangle holds on 100 inputs; measured {report.max_measured:.3f} "
               f"<= assembled bound {report.bound_rhs:.3f}")


# -- criterion 9: desk-scale training sanity --------------------------------------

def _train_until(net, data, test_data, lr, seed, target=0.95, max_epochs=200):
    opt = make_optimizer(net, "sgd", lr=lr, momentum=0.9)
    epochs_used = 0
    train_acc = 0.0
    for epoch in range(max_epochs):
        m = train_epoch(net, data, opt, seed=seed, epoch=epoch, batch_size=32)
        epochs_used = epoch + 1
        train_acc = m.accuracy
        if train_acc >= target:
            break
    return train_acc, evaluate(net, test_data).accuracy, epochs_used


def test_criterion_9_training_sanity():
    start = time.perf_counter()
    from replab.harness.config import DatasetConfig

    ds = DatasetConfig(kind="synthetic", classes=4, train_size=2000, test_size=500,
                       style="blobs", noise=4.0)
    train_data, test_data = load_dataset(ds, (1, 8, 8), seed=9)

    e2e_net = build_network(cnn_spec(method="e2e"), seed=9)
    e2e_train, e2e_test, e2e_epochs = _train_until(e2e_net, train_data, test_data,
                                                   lr=0.05, seed=9)
    assert e2e_train >= 0.90, f"e2e train accuracy {e2e_train}"

    repl_net = build_network(cnn_spec(method="repl"), seed=9)
    _, repl_test, repl_epochs = _train_until(repl_net, train_data, test_data,
                                             lr=0.05, seed=9)
    assert repl_test >= e2e_test - 0.05, f"repl {repl_test} vs e2e {e2e_test}"

    repl_cost = cost_report(cnn_spec(method="repl"), seed=9)
    assert repl_cost.params_repl < repl_cost.params_e2e
    assert repl_cost.flops_repl < repl_cost.flops_e2e

    rm_net = build_network(cnn_spec(method="remove_only"), seed=9)
    _, rm_test, _ = _train_until(rm_net, train_data, test_data, lr=0.05, seed=9,
                                 target=0.95, max_epochs=30)
    assert rm_test > 1.5 / 4  # comfortably above the 25% chance rate

    elapsed = time.perf_counter() - start
    assert elapsed < 600.0
    _report(9, f"e2e train {e2e_train:.3f} ({e2e_epochs} ep), test {e2e_test:.3f}; "
               f"repl test {repl_test:.3f} ({repl_epochs} ep); remove_only test {rm_test:.3f}; "
               f"params {repl_cost.params_repl}<{repl_cost.params_e2e}, "
               f"flops {repl_cost.flops_repl}<{repl_cost.flops_e2e}; {elapsed:.0f}s")


# -- criterion 10: determinism and persistence -------------------------------------

def test_criterion_10_determinism_persistence(tmp_path):
    cfg = parse_config({
        "arch": {"family": "resnet_basic", "stages": [[5, 4]], "num_classes": 4,
                 "in_channels": 1, "image_size": 8, "method": "repl"},
        "dataset": {"classes": 4, "train_size": 64, "test_size": 32},
        "training": {"epochs": 3, "batch_size": 16, "schedule": "constant",
                     "checkpoint_every": 1},
        "seeds": [0],
        "out_dir": str(tmp_path / "runs"),
    })
    run_cell(cfg, 0, tmp_path / "a")
    run_cell(cfg, 0, tmp_path / "b")
    ra = read_metrics(tmp_path / "a" / "metrics.jsonl")
    rb = read_metrics(tmp_path / "b" / "metrics.jsonl")
    assert records_equal(ra, rb)

    ckpt_a = tmp_path / "a" / "ckpt_final.replab"
    loaded = checkpoint_load(ckpt_a)
    resaved = tmp_path / "resaved.replab"
    checkpoint_save(loaded.network, resaved, extra=loaded.extra,
                    meta={k: v for k, v in loaded.meta.items() if k != "spec"})
    assert ckpt_a.read_bytes() == resaved.read_bytes()

    import dataclasses
    import json

    cfg2 = dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, epochs=2))
    run_cell(cfg2, 0, tmp_path / "resumed")
    partial = [m for m in read_metrics(tmp_path / "resumed" / "metrics.jsonl")
               if m["record"] == "epoch"]
    (tmp_path / "resumed" / "metrics.jsonl").write_text(
        "\n".join(json.dumps(m, sort_keys=True, separators=(",", ":")) for m in partial) + "\n")
    run_cell(cfg, 0, tmp_path / "resumed", resume=True)
    resumed = read_metrics(tmp_path / "resumed" / "metrics.jsonl")
    assert records_equal(ra, resumed)
    _report(10, "reruns bitwise-equal (timing aside); checkpoints byte-stable; resume matches")
