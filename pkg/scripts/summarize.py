#!/usr/bin/env python3
"""Convert metrics record streams into aligned plain-text tables.

    python scripts/summarize.py runs/*/seed0/metrics.jsonl --record summary \\
        --columns method,k,test_accuracy,train_accuracy
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from replab.harness.metrics import read_metrics, records_to_table


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("paths", nargs="+", help="metrics.jsonl files")
    ap.add_argument("--record", default="summary", help="record type to select")
    ap.add_argument("--columns",
                    default="method,k,seed,test_accuracy,train_accuracy")
    args = ap.parse_args()

    rows = []
    for path in args.paths:
        for rec in read_metrics(path):
            if rec.get("record") == args.record:
                rec = dict(rec)
                rec.setdefault("source", path)
                rows.append(rec)
    if not rows:
        print(f"no {args.record!r} records found", file=sys.stderr)
        return 1
    print(records_to_table(rows, args.columns.split(",")))
    return 0


if __name__ == "__main__":
    sys.exit(main())
