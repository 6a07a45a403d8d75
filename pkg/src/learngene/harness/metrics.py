"""Append-only metrics emission: fixed-column CSV plus JSON lines."""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import asdict, dataclass

COLUMNS = ("run_id", "phase", "iter", "split", "loss", "accuracy", "seconds", "seed")


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    phase: str
    iter: int
    split: str
    loss: float
    accuracy: float
    seconds: float
    seed: int


def _sig6(x):
    return f"{float(x):.6g}"


def _validate_monotone(rows, last_seen):
    for row in rows:
        key = (row.run_id, row.phase, row.split)
        prev = last_seen.get(key)
        if prev is not None and row.iter < prev:
            raise ValueError(
                f"iteration went backwards for {key}: {row.iter} after {prev}")
        last_seen[key] = row.iter


def emit_metrics(rows, csv_path, jsonl_path=None):
    """Append rows; creates files with headers as needed.

    Iteration indices must be monotone per (run, phase, split), counting
    rows already on disk.  I/O failures are surfaced as warnings and the
    rows are still returned, so callers keep their in-memory copies.
    """
    rows = list(rows)
    if not rows:
        return rows

    last_seen = {}
    if os.path.exists(csv_path):
        for old in read_metrics(csv_path):
            key = (old.run_id, old.phase, old.split)
            last_seen[key] = max(old.iter, last_seen.get(key, old.iter))
    _validate_monotone(rows, last_seen)

    try:
        fresh = not os.path.exists(csv_path) or os.path.getsize(csv_path) == 0
        with open(csv_path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if fresh:
                writer.writerow(COLUMNS)
            for row in rows:
                writer.writerow([row.run_id, row.phase, row.iter, row.split,
                                 _sig6(row.loss), _sig6(row.accuracy),
                                 _sig6(row.seconds), row.seed])
        if jsonl_path is not None:
            with open(jsonl_path, "a") as fh:
                for row in rows:
                    fh.write(json.dumps(asdict(row), sort_keys=True) + "\n")
    except OSError as e:
        warnings.warn(f"metrics write failed ({e}); continuing in memory",
                      stacklevel=2)
    return rows


def read_metrics(csv_path):
    """Parse an emitted CSV back into MetricsRow values."""
    out = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is not None and tuple(reader.fieldnames) != COLUMNS:
            raise ValueError(f"unexpected metrics columns {reader.fieldnames}")
        for rec in reader:
            out.append(MetricsRow(
                run_id=rec["run_id"], phase=rec["phase"], iter=int(rec["iter"]),
                split=rec["split"], loss=float(rec["loss"]),
                accuracy=float(rec["accuracy"]), seconds=float(rec["seconds"]),
                seed=int(rec["seed"])))
    return out
