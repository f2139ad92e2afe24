"""Metrics CSV with a fixed column order.

Columns: ``config_hash, seed, variant, subset, <point>, top1, mae`` followed by
``{v2t,t2v}_{r1,r5,r10,medr,mnr}``.  Metrics that do not apply to the task
are left empty; floats carry 6 significant digits.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path

from .metrics import RECALL_KS, Metrics

KEY_COLUMNS = ("config_hash", "seed", "variant", "subset", "point")
METRIC_COLUMNS = ("top1", "mae") + tuple(
    f"{d}_{k}" for d in ("v2t", "t2v") for k in [f"r{r}" for r in RECALL_KS] + ["medr", "mnr"])
COLUMNS = KEY_COLUMNS + METRIC_COLUMNS


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".6g")
    return str(v)


def metrics_row(config_hash: str, seed: int, variant: str, subset, metrics: Metrics,
                point: str = "") -> dict[str, str]:
    row = {"config_hash": config_hash, "seed": str(seed), "variant": variant,
           "subset": "+".join(str(m) for m in subset), "point": point}
    flat = metrics.flat()
    for c in METRIC_COLUMNS:
        row[c] = fmt(flat.get(c))
    return row


def to_csv(rows: list[dict[str, str]]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def write_csv(rows: list[dict[str, str]], path) -> Path:
    path = Path(path)
    path.write_bytes(to_csv(rows).encode())
    return path


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
