import numpy as np
import pytest
from hypothesis import given, strategies as st

from rest3d.metrics import (
    MetricsReport,
    SplitMetrics,
    compare_runs,
    evaluate,
    format_delta,
    format_table,
    report_from_ious,
    rows_to_csv,
)
from rest3d.model import ModelConfig, ParamVector, init_params


def test_counts_from_ious():
    r = report_from_ious([0.3, 0.6, 0.1], [True, True, True])
    assert r.overall.acc_25 == 2 / 3
    assert r.overall.acc_50 == 1 / 3
    assert abs(r.overall.miou - 1 / 3) < 1e-15


def test_strict_threshold_at_half():
    r = report_from_ious([0.5], [False])
    assert r.overall.acc_25 == 1.0
    assert r.overall.acc_50 == 0.0


def test_perfect_predictions():
    r = report_from_ious([1.0, 1.0, 1.0], [True, False, False])
    for split in ("Unique", "Multiple", "Overall"):
        m = r.split(split)
        assert (m.miou, m.acc_25, m.acc_50) == (1.0, 1.0, 1.0)


def test_empty_eval_set():
    with pytest.raises(ValueError):
        report_from_ious([], [])


@given(st.lists(st.tuples(st.floats(0.0, 1.0), st.booleans()), min_size=1, max_size=50))
def test_report_invariants(items):
    ious, flags = zip(*items)
    r = report_from_ious(ious, flags)
    assert r.overall.n == r.unique.n + r.multiple.n
    weighted = (r.unique.miou * r.unique.n + r.multiple.miou * r.multiple.n) / r.overall.n
    assert abs(weighted - r.overall.miou) < 1e-9
    for split in ("Unique", "Multiple", "Overall"):
        m = r.split(split)
        assert 0.0 <= m.acc_50 <= m.acc_25 <= 1.0
        assert 0.0 <= m.miou <= 1.0
    assert r.overall.miou <= max(ious) + 1e-12


def test_evaluate_pure_and_perfect(tiny_dataset):
    p = init_params(ModelConfig(seed=0, d=8, hidden=8))
    samples = tiny_dataset.val_samples
    a = evaluate(p, samples, tiny_dataset.scenes)
    b = evaluate(p, samples, tiny_dataset.scenes)
    assert a == b
    with pytest.raises(ValueError):
        evaluate(p, [], tiny_dataset.scenes)
    with pytest.raises(ValueError):
        evaluate(p, [samples[0].without_mask()], tiny_dataset.scenes)


def _rep(miou):
    m = SplitMetrics(miou, 0.5, 0.25, 10)
    return MetricsReport(m, m, m)


def test_compare_single_run_has_no_deltas():
    rows = compare_runs({"only": _rep(0.3)})
    assert len(rows) == 3
    assert not any(k.startswith("delta_") for k in rows[0])
    assert "(" not in format_table(rows)


def test_compare_delta_example():
    rows = compare_runs({"supervised": _rep(0.1707), "ssl_full": _rep(0.2541)}, baseline="supervised")
    overall = [r for r in rows if r["run"] == "ssl_full" and r["split"] == "Overall"][0]
    assert format_delta(overall["delta_miou"]) == "+8.34"
    assert "(+8.34)" in format_table(rows)


def test_compare_identical_reports():
    rows = compare_runs({"a": _rep(0.4), "b": _rep(0.4)})
    assert all(r[k] == 0 for r in rows for k in r if k.startswith("delta_"))
    assert format_delta(-0.0) == "+0.00"


def test_rows_to_csv_shape():
    text = rows_to_csv(compare_runs({"a": _rep(0.4), "b": _rep(0.5)}))
    lines = text.strip().splitlines()
    assert len(lines) == 1 + 6
    assert lines[0].startswith("run,split,n,miou")
