#!/usr/bin/env python3
"""Train full-depth, remove-only, and replacement variants of one spec and
print a side-by-side table: accuracy, trainable parameters, counted FLOPs,
and the activation-memory estimate.

Desk-scale analogue of the method-comparison experiments.

    python scripts/compare_methods.py --config configs/cnn_repl.json --epochs 10
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from replab.harness.config import apply_overrides, load_config
from replab.harness.experiment import run_cell
from replab.harness.metrics import records_to_table


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/cnn_repl.json")
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/compare_methods")
    args = ap.parse_args()

    cfg = load_config(args.config)
    overrides = {"out_dir": args.out}
    if args.epochs is not None:
        overrides["training.epochs"] = args.epochs
    cfg = apply_overrides(cfg, overrides)

    rows = []
    for method in ("e2e", "remove_only", "repl"):
        cell = apply_overrides(cfg, {"arch.method": method})
        summary = run_cell(cell, args.seed, Path(args.out) / f"{method}_seed{args.seed}")
        cost = summary["cost"]
        rows.append({
            "method": method,
            "test_accuracy": summary["test_accuracy"],
            "train_accuracy": summary["train_accuracy"],
            "trainable_params": cost["params_repl"],
            "flops": cost["flops_repl"],
            "act_mem_bytes": cost["act_mem_repl"],
        })
    print(records_to_table(rows, ["method", "test_accuracy", "train_accuracy",
                                  "trainable_params", "flops", "act_mem_bytes"]))
    return 0


if __name__ == "__main__":
    sys.exit(main())
