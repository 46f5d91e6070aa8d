from dataclasses import replace

import numpy as np
import pytest

from rest3d.losses import LossWeights, unsupervised_loss
from rest3d.model import ParamVector, forward
from rest3d.scenes import SplitSpec, make_splits
from rest3d.trainer import (
    MODES,
    TrainConfig,
    TrainingDiverged,
    burn_in_step,
    init_state,
    init_student,
    mutual_step,
    resolve_tscs_epoch,
    run,
    teacher_pseudo_labels,
    tscs_event,
    unsupervised_batch,
)

FAST = TrainConfig(total_iters=30, burn_in_iters=10, batch_labeled=4, batch_unlabeled=4, eval_every=0,
                   labeled_ratio=0.2, d=8, hidden=8, lr=0.01)


def _state(ds, cfg=FAST):
    d_l, d_u = make_splits(ds.samples, SplitSpec(cfg.labeled_ratio, cfg.seed))
    return init_state(cfg, ds, d_l, d_u)


def _after_burn_in(ds, cfg=FAST):
    st = _state(ds, cfg)
    for i in range(cfg.burn_in_iters):
        st.iter = i
        burn_in_step(st, cfg, ds)
    st.iter = cfg.burn_in_iters
    init_student(st, cfg)
    return st


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(total_iters=5, burn_in_iters=6)
    with pytest.raises(ValueError):
        TrainConfig(ema_alpha=1.5)
    with pytest.raises(ValueError):
        TrainConfig(batch_labeled=0)
    with pytest.raises(ValueError):
        TrainConfig(tscs_period="sometime")


def test_mode_flags():
    assert MODES["supervised"]["ssl_enabled"] is False
    assert MODES["ssl_full"]["enable_qdw"] and MODES["ssl_full"]["enable_tscs"]
    assert not MODES["ssl_plain"]["enable_qdw"] and not MODES["ssl_plain"]["enable_tscs"]


def test_burn_in_moves_teacher_only(tiny_dataset):
    st = _state(tiny_dataset)
    before = st.teacher.copy()
    burn_in_step(st, FAST, tiny_dataset)
    assert st.student is None
    assert not np.array_equal(before.values, st.teacher.values)


def test_burn_in_zero_weights_is_noop_without_decay(tiny_dataset):
    cfg = replace(FAST, sup_bce=0.0, sup_dice=0.0, sup_score=0.0, weight_decay=0.0)
    st = _state(tiny_dataset, cfg)
    before = st.teacher.values.copy()
    burn_in_step(st, cfg, tiny_dataset)
    np.testing.assert_array_equal(st.teacher.values, before)


def test_init_student_copies_and_resets(tiny_dataset):
    st = _after_burn_in(tiny_dataset)
    assert st.student.values.tobytes() == st.teacher.values.tobytes()
    assert st.student.values is not st.teacher.values
    assert st.opt.t == 0 and not st.opt.m.any() and not st.opt.v.any()
    with pytest.raises(RuntimeError):
        init_student(st, FAST)


@pytest.mark.parametrize("alpha", [1.0, 0.0, 0.9])
def test_ema_update(tiny_dataset, alpha):
    cfg = replace(FAST, ema_alpha=alpha)
    st = _after_burn_in(tiny_dataset, cfg)
    info = mutual_step(st, cfg, tiny_dataset)
    prev = info["teacher_prev"].values
    expect = alpha * prev + (1 - alpha) * st.student.values
    assert np.max(np.abs(st.teacher.values - expect)) <= 1e-12
    if alpha == 1.0:
        np.testing.assert_array_equal(st.teacher.values, prev)
    if alpha == 0.0:
        np.testing.assert_array_equal(st.teacher.values, st.student.values)


def test_ema_arithmetic():
    a = 0.9996
    assert abs((a * 2.0 + (1 - a) * 1.0) - 1.9996) < 1e-12


def test_qdw_irrelevant_when_masks_agree(tiny_dataset):
    st = _after_burn_in(tiny_dataset)
    ids = st.unlabeled[:3]
    # pseudo labels chosen to equal the student's own hard masks on the strong views
    on, off = replace(FAST, enable_qdw=True), replace(FAST, enable_qdw=False)
    pseudo = teacher_pseudo_labels(st.teacher, FAST, tiny_dataset, ids, 0)
    lo, _, lam = unsupervised_batch(st.student, on, tiny_dataset, ids, pseudo, 0)
    lf, _, lam_off = unsupervised_batch(st.student, off, tiny_dataset, ids, pseudo, 0)
    assert all(v == 1.0 for v in lam_off if v != 0.0)
    for a, b, w in zip(lo, lf, lam):
        if w == 1.0:
            assert a.total == b.total


def test_lambda_weight_bounds(tiny_dataset):
    st = _after_burn_in(tiny_dataset, replace(FAST, skip_empty_pseudo=False))
    cfg = replace(FAST, skip_empty_pseudo=False)
    for k in range(5):
        st.iter = FAST.burn_in_iters + 1 + k
        info = mutual_step(st, cfg, tiny_dataset)
        assert all(0.0 <= v <= 1.0 for v in info["lambda"])


def test_tscs_threshold_rules(tiny_dataset):
    st = _after_burn_in(tiny_dataset)
    n = len(st.unlabeled)
    k = 3
    ids = list(st.unlabeled)

    def planted(params, dataset, ids_):
        # teacher and student agree on the first k samples and are disjoint elsewhere
        out = []
        for j, sid in enumerate(ids_):
            npts = dataset.scenes[dataset.samples[sid].scene_id].n_points
            m = np.zeros(npts, bool)
            m[: npts // 2] = True
            if j >= k and params is st.student:
                m = ~m
            out.append(m)
        return out

    impossible = replace(FAST, tscs_threshold=1.0 + 1e-9)
    assert tscs_event(st, impossible, tiny_dataset, predict=planted) == []
    assert len(st.unlabeled) == n

    st.tscs_done = False
    promoted = tscs_event(st, FAST, tiny_dataset, predict=planted)
    assert [p[1] for p in promoted] == ids[:k]
    assert len(st.unlabeled) == n - k
    assert all(p[2] > FAST.tscs_threshold for p in promoted)
    assert set(ids[:k]) <= set(st.labeled) and set(ids[:k]) <= st.pseudo_ids


def test_tscs_equal_to_threshold_not_promoted(tiny_dataset):
    st = _after_burn_in(tiny_dataset)

    def half(params, dataset, ids_):
        out = []
        for sid in ids_:
            m = np.zeros(dataset.scenes[dataset.samples[sid].scene_id].n_points, bool)
            m[:4] = True
            if params is st.student:
                m[2:4] = False  # IoU exactly 0.5
            out.append(m)
        return out

    assert tscs_event(st, replace(FAST, tscs_threshold=0.5), tiny_dataset, predict=half) == []


def test_tscs_empty_unlabeled_is_noop(tiny_dataset):
    st = _after_burn_in(tiny_dataset)
    st.unlabeled = []
    assert tscs_event(st, FAST, tiny_dataset) == []


def test_resolve_tscs_epoch():
    assert resolve_tscs_epoch(replace(FAST, tscs_period="mid"), 20) == 10
    assert resolve_tscs_epoch(replace(FAST, tscs_period="early"), 20) == 2
    assert resolve_tscs_epoch(replace(FAST, tscs_period="late"), 20) == 18
    assert resolve_tscs_epoch(replace(FAST, tscs_period="never"), 20) is None
    assert resolve_tscs_epoch(replace(FAST, enable_tscs=False), 20) is None


def test_run_deterministic(tiny_dataset):
    a = run(FAST, tiny_dataset)
    b = run(FAST, tiny_dataset)
    assert a.log == b.log
    assert a.state.teacher.values.tobytes() == b.state.teacher.values.tobytes()


def test_run_invariants_and_provenance(tiny_dataset, tmp_path):
    cfg = replace(FAST, total_iters=60, tscs_threshold=0.5, eval_every=1)
    res = run(cfg, tiny_dataset, out_dir=tmp_path)
    total = len(tiny_dataset.samples)
    sizes = [r["n_labeled"] for r in res.log]
    assert all(r["n_labeled"] + r["n_unlabeled"] == total for r in res.log)
    assert sizes == sorted(sizes)
    assert "teacher:optimizer" not in res.state.provenance
    for name in ("burn_in_teacher.ckpt", "final_teacher.ckpt", "final_student.ckpt", "train_log.csv"):
        assert (tmp_path / name).exists()
    assert res.eval_history


def test_burn_in_only_run(tiny_dataset):
    cfg = replace(FAST, total_iters=10, burn_in_iters=10)
    res = run(cfg, tiny_dataset)
    assert res.state.student is None


def test_zero_burn_in(tiny_dataset):
    cfg = replace(FAST, total_iters=5, burn_in_iters=0, ema_alpha=1.0)
    seen = {}

    def cb(ev, state, info):
        if ev == "init_student":
            seen["teacher"] = state.teacher.copy()

    res = run(cfg, tiny_dataset, callback=cb)
    fresh = _state(tiny_dataset, cfg).teacher
    assert seen["teacher"].values.tobytes() == fresh.values.tobytes()


def test_full_labels_runs_supervised(tiny_dataset):
    cfg = replace(FAST, labeled_ratio=1.0, total_iters=15)
    res = run(cfg, tiny_dataset)
    assert res.state.unlabeled == [] and res.report is not None


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_checkpoint(tiny_dataset, tmp_path):
    cfg = replace(FAST, total_iters=14, lr=1e300)
    with pytest.raises((TrainingDiverged, FloatingPointError)):
        run(cfg, tiny_dataset, out_dir=tmp_path)
