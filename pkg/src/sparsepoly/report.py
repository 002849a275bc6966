"""Verify report records (JSONL) and bench rows (CSV)."""
from __future__ import annotations

import csv
import json
import math
from importlib import resources

import jsonschema

BENCH_COLUMNS = ("index", "runtime_ns", "early_term_fraction")


def schema() -> dict:
    return json.loads(resources.files("sparsepoly").joinpath("data/report.schema.json").read_text())


def verdict_record(index: int, label, candidate: bool, verdict=None) -> dict:
    """Report line for one input; ``verdict`` is None for skipped non-candidates."""
    if verdict is None:
        return {"index": index, "label": label, "candidate": candidate, "verdict": "skipped",
                "margins": [], "runtime_ns": 0, "rows_processed": 0, "rows_terminated": 0}
    margins = [None if m is None or math.isnan(m) else (m if math.isfinite(m) else None)
               for m in verdict.margins]
    return {"index": index, "label": label, "candidate": candidate,
            "verdict": verdict.result.value, "margins": margins,
            "runtime_ns": int(verdict.runtime_ns), "rows_processed": int(verdict.rows_processed),
            "rows_terminated": int(verdict.rows_terminated)}


def validate_record(record: dict) -> None:
    jsonschema.validate(record, schema())


def dumps_record(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"), allow_nan=False)


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def bench_row(record: dict) -> dict:
    processed = record.get("rows_processed", 0)
    frac = record["rows_terminated"] / processed if processed else 0.0
    return {"index": record["index"], "runtime_ns": record["runtime_ns"], "early_term_fraction": frac}


def write_bench_csv(fh, rows) -> None:
    w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
