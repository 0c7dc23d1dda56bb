"""Newline-delimited metrics records: one self-describing JSON object per line.

Files are append-only; a resumed run appends to the same stream. Numeric
fields are plain decimals (json default, no locale).
"""

from __future__ import annotations

import json
from pathlib import Path

TIMING_FIELDS = ("wall_seconds",)


def _plain(value):
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        try:
            return value.item()
        except Exception:
            pass
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def format_record(record: dict) -> str:
    return json.dumps(_plain(record), sort_keys=True, separators=(",", ":"))


def emit_metrics(record: dict, path) -> str:
    """Append one record as a single line; returns the serialized line."""
    line = format_record(record)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")
    return line


def parse_line(line: str) -> dict:
    return json.loads(line)


def read_metrics(path) -> list[dict]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(parse_line(line))
    return out


def strip_timing(record: dict) -> dict:
    return {k: v for k, v in record.items() if k not in TIMING_FIELDS}


def records_equal(a: list[dict], b: list[dict]) -> bool:
    """Record-for-record equality, ignoring wall-clock fields."""
    if len(a) != len(b):
        return False
    return all(strip_timing(x) == strip_timing(y) for x, y in zip(a, b))


def records_to_table(records: list[dict], columns: list[str],
                     float_digits: int = 4) -> str:
    """Render selected record fields as an aligned plain-text table."""
    def cell(rec, col):
        val = rec.get(col, "-")
        if isinstance(val, float):
            return f"{val:.{float_digits}f}"
        return str(val)

    rows = [[cell(r, c) for c in columns] for r in records]
    widths = [max(len(c), *(len(row[i]) for row in rows)) if rows else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)
