"""Metrics emission: fixed columns, 6-significant-digit round trips."""

import json
import math

import pytest

from learngene.harness.metrics import COLUMNS, MetricsRow, emit_metrics, read_metrics


def row(i=0, run="r", phase="train", split="train", loss=0.5, acc=0.9,
        secs=1.0, seed=0):
    return MetricsRow(run, phase, i, split, loss, acc, secs, seed)


def test_empty_rows_touch_nothing(tmp_path):
    csv_path = tmp_path / "m.csv"
    assert emit_metrics([], csv_path) == []
    assert not csv_path.exists()


def test_empty_rows_leave_existing_file_alone(tmp_path):
    csv_path = tmp_path / "m.csv"
    emit_metrics([row(0)], csv_path)
    before = csv_path.read_bytes()
    emit_metrics([], csv_path)
    assert csv_path.read_bytes() == before


def test_header_written_once_and_order_preserved(tmp_path):
    csv_path = tmp_path / "m.csv"
    emit_metrics([row(0, loss=1.0), row(1, loss=0.5)], csv_path)
    emit_metrics([row(2, loss=0.25)], csv_path)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == ",".join(COLUMNS)
    assert sum(1 for ln in lines if ln.startswith("run_id")) == 1
    parsed = read_metrics(csv_path)
    assert [r.iter for r in parsed] == [0, 1, 2]
    assert [r.loss for r in parsed] == [1.0, 0.5, 0.25]


def test_parse_back_reproduces_six_significant_digits(tmp_path):
    csv_path = tmp_path / "m.csv"
    values = [1.23456789, 0.000123456789, 98765.4321, 2.0 / 3.0]
    rows = [row(i, loss=v, acc=v / 2, secs=v * 3) for i, v in enumerate(values)]
    emit_metrics(rows, csv_path)
    for orig, back in zip(rows, read_metrics(csv_path)):
        assert back.loss == float(f"{orig.loss:.6g}")
        assert back.accuracy == float(f"{orig.accuracy:.6g}")
        assert math.isclose(back.loss, orig.loss, rel_tol=1e-5)
        assert back.run_id == orig.run_id
        assert back.iter == orig.iter
        assert back.seed == orig.seed


def test_nan_accuracy_round_trips(tmp_path):
    csv_path = tmp_path / "m.csv"
    emit_metrics([row(0, acc=float("nan"))], csv_path)
    assert math.isnan(read_metrics(csv_path)[0].accuracy)


def test_monotone_violation_within_batch(tmp_path):
    with pytest.raises(ValueError, match="backwards"):
        emit_metrics([row(3), row(2)], tmp_path / "m.csv")


def test_monotone_enforced_across_appends(tmp_path):
    csv_path = tmp_path / "m.csv"
    emit_metrics([row(5)], csv_path)
    with pytest.raises(ValueError, match="backwards"):
        emit_metrics([row(4)], csv_path)
    # a different (phase, split) key restarts its own counter
    emit_metrics([row(0, phase="finetune")], csv_path)
    emit_metrics([row(0, split="query")], csv_path)


def test_io_failure_warns_and_returns_rows(tmp_path):
    missing_dir = tmp_path / "nope" / "m.csv"
    rows = [row(0)]
    with pytest.warns(UserWarning, match="continuing in memory"):
        assert emit_metrics(rows, missing_dir) == rows


def test_jsonl_mirror_matches_rows(tmp_path):
    csv_path, jsonl_path = tmp_path / "m.csv", tmp_path / "m.jsonl"
    rows = [row(0, loss=0.75), row(1, loss=0.5)]
    emit_metrics(rows, csv_path, jsonl_path)
    records = [json.loads(ln) for ln in jsonl_path.read_text().splitlines()]
    assert [rec["iter"] for rec in records] == [0, 1]
    assert records[0]["loss"] == 0.75
    assert set(records[0]) == set(COLUMNS)


def test_read_metrics_rejects_foreign_columns(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="unexpected metrics columns"):
        read_metrics(path)
