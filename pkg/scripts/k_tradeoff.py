#!/usr/bin/env python3
"""Replacement-interval trade-off: plan sizes, the closed-form relative cost
per K, the empirical bias proxy, and a measured per-epoch wall time.

    python scripts/k_tradeoff.py --config configs/cnn_repl.json --k 2,4,6
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from replab import analysis, cost, trainer
from replab.builder import build_pair
from replab.harness.config import apply_overrides, load_config
from replab.harness.data import load_dataset
from replab.harness.metrics import records_to_table


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/cnn_repl.json")
    ap.add_argument("--k", default="2,4,6")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = load_config(args.config)
    k_values = [int(k) for k in args.k.split(",")]
    rows = []
    for k in k_values:
        cell = apply_overrides(cfg, {"arch.k": k})
        spec = cell.arch.to_spec()
        report = cost.cost_report(spec, seed=args.seed)
        eta_bar = float(np.mean([s.eta for s in report.sites])) if report.sites else 1.0

        e2e, repl = build_pair(spec, args.seed)
        shape = (spec.in_channels, spec.image_size, spec.image_size)
        train_data, test_data = load_dataset(cell.dataset, shape, args.seed)
        err = analysis.telescoped_deviation(e2e, repl, test_data[0][:16])
        eps_bar = float(np.mean([s["eps_hat"] for s in err.sites])) if err.sites else 0.0
        pi_max = max((s["pi_hat"] for s in err.sites), default=1.0)
        h_max = max((s["h_hat"] for s in err.sites), default=1.0)
        tradeoff = cost.interval_tradeoff(spec, [k], eta_bar, eps_bar, pi_max, h_max)[0]

        opt = trainer.make_optimizer(repl, cell.training.optimizer, cell.training.lr)
        start = time.perf_counter()
        trainer.train_epoch(repl, train_data, opt, seed=args.seed, epoch=0,
                            batch_size=cell.training.batch_size)
        epoch_seconds = time.perf_counter() - start

        rows.append({
            "K": k,
            "removed_sites": report_sites(repl),
            "relative_cost_closed_form": tradeoff["relative_cost"],
            "bias_proxy": tradeoff["bias_proxy"],
            "params_ratio": report.ratio_params,
            "flops_ratio": report.ratio_flops,
            "epoch_seconds": epoch_seconds,
        })
    print(records_to_table(rows, ["K", "removed_sites", "relative_cost_closed_form",
                                  "bias_proxy", "params_ratio", "flops_ratio",
                                  "epoch_seconds"]))
    return 0


def report_sites(net) -> int:
    return len(net.sites)


if __name__ == "__main__":
    sys.exit(main())
