import csv
import json
from dataclasses import replace

import pytest

from rest3d import experiments as ex
from rest3d.experiments import ExperimentPlan, cell_config, read_svg_points, run_plan
from rest3d.scenes import SplitSpec, make_splits
from rest3d.trainer import TrainConfig, run

BASE = TrainConfig(total_iters=16, burn_in_iters=6, batch_labeled=4, batch_unlabeled=4, eval_every=0, d=4, hidden=4)


def _read(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_plan_validation():
    with pytest.raises(ValueError):
        ExperimentPlan(label_ratios=())
    with pytest.raises(ValueError):
        ExperimentPlan(modes=("ssl_magic",))
    cells = ExperimentPlan(label_ratios=(0.1,), modes=("supervised", "ssl_full"), tscs_periods=("mid", "late"), seeds=(0, 1)).cells()
    assert len(cells) == 2 + 4


def test_single_cell_table(tiny_dataset, tmp_path):
    plan = ExperimentPlan(label_ratios=(0.25,), modes=("supervised",), seeds=(0,))
    run_plan(plan, BASE, tiny_dataset, tmp_path)
    rows = [r for r in _read(tmp_path / "table1.csv") if r["split"] == "Overall"]
    assert len(rows) == 1


def test_table2_grid_and_plot(tiny_dataset, tmp_path):
    modes = ("supervised", "ssl_plain", "ssl_qdw", "ssl_tscs", "ssl_full")
    plan = ExperimentPlan(label_ratios=(0.1, 0.25), modes=modes, tscs_periods=("mid", "never"), seeds=(0,))
    run_plan(plan, BASE, tiny_dataset, tmp_path)
    t2 = _read(tmp_path / "table2.csv")
    assert [r["mode"] for r in t2] == ["ssl_plain", "ssl_qdw", "ssl_tscs", "ssl_full"]
    assert [(r["qdw"], r["tscs"]) for r in t2] == [("", ""), ("x", ""), ("", "x"), ("x", "x")]
    t4 = _read(tmp_path / "table4.csv")
    assert [r["period"] for r in t4] == ["mid", "never"]
    # the plot carries the exact CSV values
    curve = {(r["mode"], float(r["ratio"])): float(r["overall_miou"]) for r in _read(tmp_path / "miou_vs_ratio.csv")}
    pts = read_svg_points(tmp_path / "miou_vs_ratio.svg")
    assert len(pts) == len(curve) == 2 * len(modes)
    for mode, ratio, v in pts:
        assert abs(curve[(mode, ratio)] - v) <= 1e-9


def test_resume_skips_completed_cells(tiny_dataset, tmp_path, monkeypatch):
    plan = ExperimentPlan(label_ratios=(0.25,), modes=("supervised", "ssl_plain"), seeds=(0, 1))
    calls = []
    kill_at = [3]
    real = ex.run

    def counting(cfg, *a, **k):
        calls.append(cfg)
        if len(calls) == kill_at[0]:
            raise KeyboardInterrupt  # simulated kill partway through the grid
        return real(cfg, *a, **k)

    monkeypatch.setattr(ex, "run", counting)
    with pytest.raises(KeyboardInterrupt):
        run_plan(plan, BASE, tiny_dataset, tmp_path)
    done = sorted(p.parent.name for p in (tmp_path / "cells").glob("*/result.json"))
    assert len(done) == 2

    calls.clear()
    kill_at[0] = None
    run_plan(plan, BASE, tiny_dataset, tmp_path)
    assert len(calls) == 2  # only the two unfinished cells ran


def test_changed_config_invalidates_cell(tiny_dataset, tmp_path):
    plan = ExperimentPlan(label_ratios=(0.25,), modes=("supervised",), seeds=(0,))
    run_plan(plan, BASE, tiny_dataset, tmp_path)
    first = (tmp_path / "cells" / "r0.25_supervised_s0" / "manifest.json").read_text()
    run_plan(plan, replace(BASE, lr=0.02), tiny_dataset, tmp_path)
    assert (tmp_path / "cells" / "r0.25_supervised_s0" / "manifest.json").read_text() != first


def test_manifest_reproduces_cell(tiny_dataset, tmp_path):
    plan = ExperimentPlan(label_ratios=(0.25,), modes=("ssl_full",), seeds=(2,))
    run_plan(plan, BASE, tiny_dataset, tmp_path, save_logs=True)
    cell = tmp_path / "cells" / "r0.25_ssl_full_mid_s2"
    man = json.loads((cell / "manifest.json").read_text())
    assert man["dataset_sha256"] == ex.dataset_checksum(tiny_dataset)
    cfg = TrainConfig(**man["config"])
    assert cfg.seed == man["seed"]
    split = make_splits(tiny_dataset.samples, SplitSpec(cfg.labeled_ratio, cfg.seed))
    run(cfg, tiny_dataset, split=split, out_dir=tmp_path / "again")
    for name in ("train_log.csv", "final_teacher.ckpt", "final_student.ckpt"):
        assert ex.file_checksum(cell / name) == ex.file_checksum(tmp_path / "again" / name)


def test_cell_config_applies_mode_and_period():
    cfg = cell_config(BASE, 0.05, "ssl_tscs", "late", 3)
    assert (cfg.labeled_ratio, cfg.seed, cfg.tscs_period) == (0.05, 3, "late")
    assert cfg.enable_tscs and not cfg.enable_qdw
