import json

import numpy as np
import pytest

from prplan import artifacts
from prplan.evaluation import bench, evaluate, latency_summary, observation_stream


def test_latency_summary():
    s = latency_summary([0.001, 0.002, 0.003, 0.004])
    assert s["count"] == 4
    assert s["mean_ms"] == pytest.approx(2.5) and s["p50_ms"] == pytest.approx(2.5)
    assert s["max_ms"] == pytest.approx(4.0) and s["hz"] == pytest.approx(400.0)
    assert latency_summary([]) == {"count": 0}


def test_evaluate_report(tiny_model):
    r = evaluate(tiny_model.planner, "maze", 2, 0, max_steps=5)
    assert r["episodes"] == 2 and len(r["lengths"]) == 2 and all(1 <= n <= 5 for n in r["lengths"])
    assert 0.0 <= r["success_rate"] <= 1.0
    assert r["latency"]["count"] == sum(r["lengths"])
    again = evaluate(tiny_model.planner, "maze", 2, 0, max_steps=5)
    assert again["returns"] == r["returns"] and again["lengths"] == r["lengths"]


def test_bench_honours_decisions_and_warmup(tiny_model):
    report = bench(tiny_model.planner, "maze", 5, 2, 0)
    assert len(report.samples_s) == 5 and report.warmup == 2
    assert report.tokens_per_decision == 5 + 5
    assert report.levels == [(17, 4, 5), (5, 1, 5)]
    assert report.csv_rows()[0] == "mode,decision,seconds" and len(report.csv_rows()) == 6


def test_observation_stream_is_model_independent():
    a, b = observation_stream("maze", 4, 1), observation_stream("maze", 4, 1)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_bench_files_schema(tiny_model, tmp_path):
    rows = [bench(tiny_model.planner, "maze", 3, 1, 0, "prp"),
            bench(artifacts.untrained_like(tiny_model, "one-shot"), "maze", 3, 1, 0, "one-shot")]
    doc = artifacts.write_bench(tmp_path, rows)
    lines = (tmp_path / "bench.csv").read_text().splitlines()
    assert lines[0] == "mode,decision,seconds" and len(lines) == 7
    assert {ln.split(",")[0] for ln in lines[1:]} == {"prp", "one-shot"}
    on_disk = json.loads((tmp_path / "bench.json").read_text())
    assert on_disk == json.loads(json.dumps(doc))
    assert on_disk["schema"] == 1
    keys = {"mode", "warmup_excluded", "tokens_per_decision", "levels", "count", "mean_ms", "p50_ms", "p90_ms",
            "p99_ms", "max_ms", "hz", "latency_vs_first"}
    assert all(set(r) == keys for r in on_disk["rows"])
    assert [r["tokens_per_decision"] for r in on_disk["rows"]] == [10, 17]
    assert on_disk["rows"][0]["latency_vs_first"] == 1.0
