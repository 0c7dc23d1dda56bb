"""Experiment orchestration: one (config, seed) cell at a time.

A cell builds the network, trains it with per-epoch metrics records, writes
checkpoints, and finishes with a summary record carrying the cost report and,
for replacement runs, the error report and per-site coefficient fits. Resume
re-derives the data shuffle from (seed, epoch), so a resumed run appends
records identical to the straight-through run (wall-clock fields aside).
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .. import analysis, cost, trainer
from ..builder import Network, build_network, build_pair
from .checkpoint import checkpoint_load, checkpoint_save
from .config import ExperimentConfig
from .data import load_dataset
from .metrics import emit_metrics

_CKPT_RE = re.compile(r"ckpt_ep(\d+)\.replab$")


def _site_fits(e2e: Network, repl: Network) -> list[dict]:
    """Least-squares distance of each removed operator to its anchor span.

    CNN sites fit the removed block's input-facing spatial kernel against the
    normalized anchors channel-wise; ViT sites fit the removed attention
    output projection against the raw neighbor projections.
    """
    e2e_units = dict(e2e.units)
    out = []
    for site in repl.sites:
        removed = e2e_units[site.block_name]
        layer = dict(repl.units)[site.layer_name]
        if layer.kind == "computing_basic":
            fit = analysis.best_fit_coeffs(
                removed.conv1.data, layer.anchors["prev_conv2"].data,
                layer.anchors["next_conv1"].data, normalized=True, groups="channel")
        elif layer.kind == "computing_bottleneck":
            fit = analysis.best_fit_coeffs(
                removed.conv_mid.data, layer.anchors["prev_mid"].data,
                layer.anchors["next_mid"].data, normalized=True, groups="channel")
        else:
            fit = analysis.best_fit_coeffs(
                removed.wo.data, layer.anchors["wo_prev"].data,
                layer.anchors["wo_next"].data, normalized=False)
        out.append({"site": site.layer_name, **fit.to_record()})
    return out


def _latest_checkpoint(cell_dir: Path):
    best = None
    for path in cell_dir.glob("ckpt_ep*.replab"):
        m = _CKPT_RE.search(path.name)
        if m:
            epoch = int(m.group(1))
            if best is None or epoch > best[0]:
                best = (epoch, path)
    return best


def run_cell(cfg: ExperimentConfig, seed: int, cell_dir, resume: bool = False) -> dict:
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = cell_dir / "metrics.jsonl"
    spec = cfg.arch.to_spec()
    shape = (spec.in_channels, spec.image_size, spec.image_size)
    train_data, test_data = load_dataset(cfg.dataset, shape, seed)
    t = cfg.training

    # the e2e twin shares retained parameters with the replacement net; its
    # removed blocks keep their (seed-determined) init values, which is also
    # what a resumed run reconstructs
    if spec.method == "repl":
        e2e_twin, net = build_pair(spec, seed)
    else:
        e2e_twin, net = None, build_network(spec, seed)
    opt = trainer.make_optimizer(net, t.optimizer, t.lr, t.momentum, t.weight_decay)

    start_epoch = 0
    latest = _latest_checkpoint(cell_dir) if resume else None
    if latest is not None:
        epoch_done, path = latest
        loaded = checkpoint_load(path)
        for pid, p in loaded.network.registry.params.items():
            net.registry.params[pid].data = p.data
        for bid, b in loaded.network.registry.buffers.items():
            net.registry.buffers[bid].data = b.data
        opt.load_state_tensors(loaded.extra)
        opt.steps = int(loaded.meta.get("opt_steps", 0))
        start_epoch = epoch_done + 1

    base = {"seed": seed, "method": spec.method, "k": spec.K}
    for epoch in range(start_epoch, t.epochs):
        if t.schedule == "cosine":
            opt.lr = trainer.cosine_lr(t.lr, epoch, t.epochs)
        m_train = trainer.train_epoch(net, train_data, opt, seed, epoch,
                                      t.batch_size, t.grad_workers)
        emit_metrics({"record": "epoch", **base, **m_train.to_record()}, metrics_path)
        m_eval = trainer.evaluate(net, test_data, epoch=epoch)
        emit_metrics({"record": "epoch", **base, **m_eval.to_record()}, metrics_path)
        if t.checkpoint_every and (epoch + 1) % t.checkpoint_every == 0:
            checkpoint_save(net, cell_dir / f"ckpt_ep{epoch}.replab",
                            extra=opt.state_tensors(),
                            meta={"epoch": epoch, "seed": seed, "opt_steps": opt.steps})

    final_train = trainer.evaluate(net, train_data)
    final_test = trainer.evaluate(net, test_data)
    checkpoint_save(net, cell_dir / "ckpt_final.replab",
                    extra=opt.state_tensors(),
                    meta={"epoch": t.epochs - 1, "seed": seed, "opt_steps": opt.steps})

    summary = {
        "record": "summary", **base,
        "epochs": t.epochs,
        "train_loss": final_train.loss, "train_accuracy": final_train.accuracy,
        "test_loss": final_test.loss, "test_accuracy": final_test.accuracy,
        "cost": cost.cost_report(spec, seed=seed).to_record(),
    }
    if spec.method == "repl" and e2e_twin is not None:
        probes = test_data[0][: min(32, len(test_data[0]))]
        report = analysis.telescoped_deviation(e2e_twin, net, probes)
        summary["error_report"] = report.to_record()
        summary["site_fits"] = _site_fits(e2e_twin, net)
    emit_metrics(summary, metrics_path)
    return summary


def run_experiment(cfg: ExperimentConfig, resume: bool = False) -> list[dict]:
    """Run every seed of the config; one subdirectory per seed."""
    out_dir = Path(cfg.out_dir)
    summaries = []
    for seed in cfg.seeds:
        summaries.append(run_cell(cfg, seed, out_dir / f"seed{seed}", resume=resume))
    return summaries


def evaluate_deploy(model, data, batch_size: int = 64) -> dict:
    """Top-1/top-5/loss of a deploy model; pure numpy, no tape."""
    x_all, y_all = data
    n = len(y_all)
    correct = 0
    correct5 = 0
    total_loss = 0.0
    classes = model.num_classes
    for lo in range(0, n, batch_size):
        xb, yb = x_all[lo : lo + batch_size], y_all[lo : lo + batch_size]
        logits = model.forward(xb)
        shift = logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(logits - shift).sum(axis=1, keepdims=True)) + shift
        total_loss += float((lse[:, 0] - logits[np.arange(len(yb)), yb]).sum())
        correct += int((logits.argmax(axis=1) == yb).sum())
        if classes >= 5:
            top5 = np.argsort(logits, axis=1)[:, -5:]
            correct5 += int(sum(y in row for y, row in zip(yb, top5)))
    out = {"split": "eval", "loss": total_loss / n, "accuracy": correct / n}
    if classes >= 5:
        out["top5"] = correct5 / n
    return out
