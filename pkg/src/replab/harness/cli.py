"""Command-line interface.

Subcommands: train, evaluate, cost, deploy, analyze, sweep. Flags mirror
config keys through repeated ``--set section.key=value`` overrides (plus a few
shortcuts) with flag-over-file precedence.

Exit codes: 0 success, 1 usage/config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .. import analysis, cost, trainer
from ..builder import build_pair
from ..deploy import equivalence_check, export_deploy
from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from .config import ConfigError, apply_overrides, load_config
from .data import DataError, load_dataset
from .experiment import evaluate_deploy, run_cell, run_experiment
from .metrics import emit_metrics, format_record


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit(2); we want exit 1
        raise UsageError(message)


def _parse_set(pairs) -> dict:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def _load_cfg(args) -> "ExperimentConfig":
    cfg = load_config(args.config)
    overrides = _parse_set(getattr(args, "set", None))
    if getattr(args, "k", None) is not None:
        overrides["arch.k"] = args.k
    if getattr(args, "method", None) is not None:
        overrides["arch.method"] = args.method
    if getattr(args, "epochs", None) is not None:
        overrides["training.epochs"] = args.epochs
    if getattr(args, "seeds", None) is not None:
        overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = args.out
    return apply_overrides(cfg, overrides) if overrides else cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="path to a JSON experiment config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (dotted, e.g. arch.k=6)")
    p.add_argument("--k", type=int, help="shortcut for --set arch.k=...")
    p.add_argument("--method", help="shortcut for --set arch.method=...")
    p.add_argument("--epochs", type=int, help="shortcut for --set training.epochs=...")
    p.add_argument("--seeds", help="comma-separated seed list override")
    p.add_argument("--out", help="output directory override")


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    for summary in run_experiment(cfg, resume=args.resume):
        print(format_record(summary))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    loaded = checkpoint_load(args.checkpoint)
    spec = cfg.arch.to_spec()
    shape = (spec.in_channels, spec.image_size, spec.image_size)
    seed = cfg.seeds[0]
    _, test_data = load_dataset(cfg.dataset, shape, seed)
    if loaded.flavor == "dynamic":
        record = trainer.evaluate(loaded.network, test_data).to_record()
    else:
        record = evaluate_deploy(loaded.deploy, test_data)
    record = {"record": "evaluate", "checkpoint": str(args.checkpoint), **record}
    print(format_record(record))
    return 0


def cmd_cost(args) -> int:
    cfg = _load_cfg(args)
    spec = cfg.arch.to_spec()
    seed = cfg.seeds[0]
    report = cost.cost_report(spec, seed=seed)
    record = {"record": "cost", "method": spec.method, "k": spec.K,
              **report.to_record()}
    if spec.method == "repl" and report.sites:
        eta_bar = float(np.mean([s.eta for s in report.sites]))
        e2e, repl = build_pair(spec, seed)
        shape = (spec.in_channels, spec.image_size, spec.image_size)
        _, test_data = load_dataset(cfg.dataset, shape, seed)
        probes = test_data[0][:16]
        err = analysis.telescoped_deviation(e2e, repl, probes)
        eps_bar = float(np.mean([s["eps_hat"] for s in err.sites])) if err.sites else 0.0
        pi_max = max((s["pi_hat"] for s in err.sites), default=1.0)
        h_max = max((s["h_hat"] for s in err.sites), default=1.0)
        k_values = [int(k) for k in args.k_values.split(",")] if args.k_values else [spec.K]
        record["tradeoff"] = cost.interval_tradeoff(
            spec, k_values, eta_bar, eps_bar, pi_max, h_max)
    print(format_record(record))
    if args.out:
        emit_metrics(record, Path(args.out) / "cost.jsonl")
    return 0


def cmd_deploy(args) -> int:
    loaded = checkpoint_load(args.checkpoint)
    if loaded.flavor != "dynamic":
        raise UsageError("deploy export needs a dynamic checkpoint")
    net = loaded.network
    model = export_deploy(net)
    out = Path(args.out or Path(args.checkpoint).with_suffix(".deploy.replab"))
    checkpoint_save(model, out)
    spec = net.spec
    rng = np.random.default_rng(0)
    inputs = [rng.normal(size=(8, spec.in_channels, spec.image_size, spec.image_size))
              for _ in range(args.probes)]
    record = {"record": "deploy", "checkpoint": str(args.checkpoint),
              "deploy_path": str(out), "ops": len(model.ops),
              "max_abs_diff": equivalence_check(net, model, inputs)}
    print(format_record(record))
    return 0


def cmd_analyze(args) -> int:
    cfg = _load_cfg(args)
    spec = cfg.arch.to_spec()
    if spec.method != "repl":
        raise UsageError("analyze needs arch.method=repl")
    seed = cfg.seeds[0]
    e2e, repl = build_pair(spec, seed)
    if args.checkpoint:
        loaded = checkpoint_load(args.checkpoint)
        for pid, p in loaded.network.registry.params.items():
            repl.registry.params[pid].data = p.data
        for bid, b in loaded.network.registry.buffers.items():
            repl.registry.buffers[bid].data = b.data
    shape = (spec.in_channels, spec.image_size, spec.image_size)
    _, test_data = load_dataset(cfg.dataset, shape, seed)
    probes = test_data[0][: args.probes]
    report = analysis.telescoped_deviation(e2e, repl, probes)
    from .experiment import _site_fits

    record = {"record": "analyze", "seed": seed, "k": spec.K,
              **report.to_record(), "site_fits": _site_fits(e2e, repl)}
    print(format_record(record))
    if args.out:
        emit_metrics(record, Path(args.out) / "analysis.jsonl")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    methods = args.methods.split(",") if args.methods else [cfg.arch.method]
    k_values = [int(k) for k in args.k_values.split(",")] if args.k_values else [cfg.arch.k]
    out_root = Path(cfg.out_dir)
    summary_path = out_root / "sweep.jsonl"
    for method in methods:
        for k in k_values:
            cell_cfg = apply_overrides(cfg, {"arch.method": method, "arch.k": k})
            for seed in cell_cfg.seeds:
                cell_dir = out_root / "cells" / f"{method}_k{k}_seed{seed}"
                summary = run_cell(cell_cfg, seed, cell_dir, resume=args.resume)
                emit_metrics(summary, summary_path)
                print(format_record({"cell": str(cell_dir),
                                     "test_accuracy": summary["test_accuracy"]}))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="replab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train per the config, one cell per seed")
    _add_common(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from the latest epoch checkpoint in the cell dir")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the config's test split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("cost", help="parameter/FLOP/memory report and K trade-off")
    _add_common(p)
    p.add_argument("--k-values", help="comma-separated K list for the trade-off table")
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("deploy", help="export a static deploy model and check equivalence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="deploy checkpoint path")
    p.add_argument("--probes", type=int, default=12, help="random input batches to compare")
    p.set_defaults(fn=cmd_deploy)

    p = sub.add_parser("analyze", help="replacement-error report and coefficient fits")
    _add_common(p)
    p.add_argument("--checkpoint", help="optional trained dynamic checkpoint")
    p.add_argument("--probes", type=int, default=32)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("sweep", help="grid over methods and K values")
    _add_common(p)
    p.add_argument("--methods", help="comma-separated method list")
    p.add_argument("--k-values", help="comma-separated K list")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (UsageError, ConfigError, DataError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # anything else is a runtime failure
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
