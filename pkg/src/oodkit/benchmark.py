"""Stored reference results from a published detector benchmark.

The shipped CSV freezes externally measured numbers for 44 configurations
(two evaluation splits, `ood` and `mix`, plus an in-distribution mAP).
They regression-pin the report layout and the non-dominated front logic;
nothing here recomputes them.
"""

from __future__ import annotations

import csv
from importlib.resources import files

_FLOAT_COLUMNS = (
    "conf_threshold",
    "map_id",
    "u_ap_ood", "u_f1_ood", "u_pre_ood", "u_rec_ood",
    "map_mix", "u_ap_mix", "u_f1_mix", "u_pre_mix", "u_rec_mix",
    "wi",
)


def load_benchmark_reference() -> list[dict]:
    resource = files("oodkit") / "data" / "benchmark_reference.csv"
    with resource.open("r", encoding="utf-8") as fh:
        rows = [dict(row) for row in csv.DictReader(fh)]
    for row in rows:
        for key in _FLOAT_COLUMNS:
            row[key] = float(row[key])
        row["a_ose"] = int(row["a_ose"])
    return rows
