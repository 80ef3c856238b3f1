"""Tests for metrics counters, the CSV format and the command-line interface."""

import sys, os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import json
from pathlib import Path

import pytest

from securebox import cli
from securebox.cli import main
from securebox.errors import MetricsFileInvalid
from securebox.metrics import (
    COLUMNS, MetricsSeries, compare, export_csv, format_comparison, fractions, load_csv,
    render_csv,
)

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def _series() -> MetricsSeries:
    m = MetricsSeries(["a", "b"], 3)
    m.record_flow(0, 0, attack=True, outcome="analyzed")
    m.record_flow(0, 1, attack=True, outcome="dropped")
    m.record_flow(0, 1, attack=True, outcome="dropped")
    m.record_flow(0, 2, attack=False, outcome="allowed")
    m.record_flow(1, 0, attack=True, outcome="analyzed")
    m.add_css_request(0, 0)
    m.add_css_request(0, 2)
    m.add_css_request(1, 1)
    m.add_update_bytes(0, 1, 120)
    return m


# ── Counters ─────────────────────────────────────────────────────────

def test_record_flow_counts_received_and_outcome():
    c = _series().at(0, 1)
    assert c.attack_received == 2
    assert c.attack_dropped == 2
    assert c.benign_received == 0


def test_unknown_outcome_rejected():
    with pytest.raises(ValueError):
        MetricsSeries(["a"], 1).record_flow(0, 0, attack=False, outcome="parked")


def test_counts_past_duration_are_dropped():
    m = MetricsSeries(["a"], 2)
    m.add_css_request(0, 5)
    m.add_update_bytes(0, 5, 99)
    assert all(r["css_requests"] == 0 and r["update_bytes"] == 0 for r in m.rows())


def test_css_requests_accumulate_per_segment():
    rows = list(_series().rows())
    assert [r["css_requests"] for r in rows] == [1, 1, 2, 0, 1, 1]
    assert [r["segment"] for r in rows] == ["a", "a", "a", "b", "b", "b"]
    assert rows[1]["update_bytes"] == 120


# ── CSV ──────────────────────────────────────────────────────────────

def test_csv_header_and_rows():
    text = render_csv(_series())
    lines = text.splitlines()
    assert lines[0] == ",".join(COLUMNS)
    assert len(lines) == 7
    assert lines[1].startswith("a,0,1,1,0,0,")


def test_csv_reload_matches_rows(tmp_path):
    series = _series()
    path = tmp_path / "metrics.csv"
    export_csv(series, path)
    assert load_csv(path) == list(series.rows())


def test_load_csv_rejects_foreign_header(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("entity_type,score\nEMAIL,0.9\n", encoding="utf-8")
    with pytest.raises(ValueError, match="not a metrics file"):
        load_csv(path)


def test_load_csv_rejects_bad_row(tmp_path):
    path = tmp_path / "metrics.csv"
    path.write_text(",".join(COLUMNS) + "\n" + "a,0," + ",".join(["x"] * 10) + "\n",
                    encoding="utf-8")
    with pytest.raises(ValueError, match=":2:"):
        load_csv(path)


# ── Summaries ────────────────────────────────────────────────────────

def test_fractions_per_segment():
    f = fractions(list(_series().rows()))
    assert f["a"].attack_received == 3
    assert f["a"].analyzed_fraction == pytest.approx(1 / 3)
    assert f["a"].dropped_fraction == pytest.approx(2 / 3)
    assert f["a"].css_requests == 2
    assert f["b"].analyzed_fraction == 1.0


def test_fraction_of_nothing_is_zero():
    m = MetricsSeries(["a"], 1)
    assert fractions(list(m.rows()))["a"].analyzed_fraction == 0.0


def test_compare_includes_segments_of_either_run():
    a = list(_series().rows())
    b = [dict(r, segment="c") if r["segment"] == "b" else r for r in a]
    result = compare(a, b)
    assert [c.segment for c in result] == ["a", "b", "c"]
    assert result[0].analyzed_delta == 0.0
    assert result[1].b is None
    assert result[1].analyzed_delta == pytest.approx(-1.0)
    table = format_comparison(result)
    assert table.splitlines()[0].startswith("segment")
    assert "-100.00%" in table


# ── CLI ──────────────────────────────────────────────────────────────

def test_cli_validate(capsys):
    assert main(["validate", str(SCENARIOS / "home.yaml")]) == 0
    out = capsys.readouterr().out
    assert "ok (1 segments, 2 hosts" in out
    assert "6 failures, 120 ticks" in out


def test_cli_validate_invalid(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("scenario:\n  name: bad\n  duration: -1\n", encoding="utf-8")
    assert main(["validate", str(path)]) == 1
    assert "bad.yaml" in capsys.readouterr().err


def test_cli_missing_file(tmp_path):
    assert main(["validate", str(tmp_path / "nope.yaml")]) == 2


def test_cli_run_writes_outputs(tmp_path):
    out = tmp_path / "out"
    assert main(["-q", "run", str(SCENARIOS / "home.yaml"), "--out", str(out)]) == 0
    rows = load_csv(out / "metrics.csv")
    assert len(rows) == 120
    records = [json.loads(line) for line in
               (out / "analytics.jsonl").read_text(encoding="utf-8").splitlines()]
    assert records[0]["record"] == "summary"
    assert any(r["record"] == "rogue" for r in records)


def test_cli_run_is_deterministic(tmp_path):
    for name in ("one", "two"):
        assert main(["-q", "run", str(SCENARIOS / "home.yaml"),
                     "--out", str(tmp_path / name)]) == 0
    assert ((tmp_path / "one" / "metrics.csv").read_bytes()
            == (tmp_path / "two" / "metrics.csv").read_bytes())


def test_cli_compare(tmp_path, capsys):
    path = tmp_path / "m.csv"
    export_csv(_series(), path)
    assert main(["compare", str(path), str(path)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[1].startswith("a")


def test_cli_compare_rejects_non_metrics(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("foo,bar\n1,2\n", encoding="utf-8")
    assert main(["compare", str(path), str(path)]) == 1


def test_load_csv_errors_are_metrics_file_errors(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("foo,bar\n1,2\n", encoding="utf-8")
    with pytest.raises(MetricsFileInvalid):
        load_csv(path)


def test_cli_does_not_mask_internal_value_errors(tmp_path, monkeypatch):
    def broken(config):
        raise ValueError("unknown outcome 'lost'")

    monkeypatch.setattr(cli, "simulate", broken)
    with pytest.raises(ValueError, match="unknown outcome"):
        main(["-q", "run", str(SCENARIOS / "home.yaml"), "--out", str(tmp_path / "out")])
