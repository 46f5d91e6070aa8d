"""Teacher-student semi-supervised training loop.

Phases, by iteration ``i``:

* ``i < burn_in_iters``: the teacher trains on labeled data alone.
* ``i == burn_in_iters``: the student is copied from the teacher and gets a
  fresh optimizer.
* ``i > burn_in_iters``: the student trains on labeled data plus teacher
  pseudo-labels; the teacher follows the student by EMA. At the configured
  epoch, unlabeled samples on which teacher and student agree closely enough
  are moved into the labeled set with the teacher's mask as their label.

With ``ssl_enabled=False`` the same schedule runs with no teacher signal: one
model trained on labeled data, optimizer reset at the phase boundary.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .augment import identity_view, restrict_mask, strong_augment, weak_augment
from .losses import (
    LossWeights,
    mask_iou,
    supervised_grad,
    supervised_loss,
    unsupervised_grad,
    unsupervised_loss,
)
from .metrics import evaluate
from .model import AdamState, ModelConfig, ParamVector, adamw_step, backward_batch, forward_batch, init_params, save_checkpoint
from .scenes import Dataset, SplitSpec, make_splits

log = logging.getLogger(__name__)

TSCS_PERIODS = {"early": 0.1, "mid": 0.5, "late": 0.9}


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 3000
    burn_in_iters: int = 400
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    ema_alpha: float = 0.998
    tscs_threshold: float = 0.95
    tscs_period: str = "mid"
    lambda_u: float = 0.5
    lr: float = 1e-2
    weight_decay: float = 1e-4
    seed: int = 0
    labeled_ratio: float = 0.01
    enable_qdw: bool = True
    enable_tscs: bool = True
    ssl_enabled: bool = True
    predicted_weight: bool = False
    labeled_strong_aug: bool = False
    skip_empty_pseudo: bool = True
    eval_every: int = 1
    eval_model: str = "teacher"
    d: int = 16
    hidden: int = 32
    sup_bce: float = 1.0
    sup_dice: float = 1.0
    sup_rel: float = 0.0
    sup_score: float = 0.5
    unsup_attn: float = 0.1

    def __post_init__(self):
        if not 0 <= self.burn_in_iters <= self.total_iters:
            raise ValueError("need 0 <= burn_in_iters <= total_iters")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must be in [0, 1]")
        if not 0.0 < self.tscs_threshold:
            raise ValueError("tscs_threshold must be positive")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.eval_model not in ("teacher", "student"):
            raise ValueError("eval_model must be 'teacher' or 'student'")
        if not (self.tscs_period in TSCS_PERIODS or self.tscs_period == "never" or str(self.tscs_period).isdigit()):
            raise ValueError(f"unknown tscs_period {self.tscs_period!r}")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(
            sup_bce=self.sup_bce,
            sup_dice=self.sup_dice,
            sup_rel=self.sup_rel,
            sup_score=self.sup_score,
            unsup_attn=self.unsup_attn,
            lambda_u=self.lambda_u,
        )

    def model_config(self, vocab: int) -> ModelConfig:
        return ModelConfig(d=self.d, hidden=self.hidden, vocab=vocab, seed=self.seed)

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]


MODES = {
    "supervised": dict(ssl_enabled=False, enable_qdw=False, enable_tscs=False),
    "ssl_plain": dict(ssl_enabled=True, enable_qdw=False, enable_tscs=False),
    "ssl_qdw": dict(ssl_enabled=True, enable_qdw=True, enable_tscs=False),
    "ssl_tscs": dict(ssl_enabled=True, enable_qdw=False, enable_tscs=True),
    "ssl_full": dict(ssl_enabled=True, enable_qdw=True, enable_tscs=True),
}


def _seed_of(*keys) -> int:
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]).generate_state(1)[0])


class _StreamSampler:
    """Endless stream of per-epoch permutations; batches may straddle epochs."""

    def __init__(self, seed: int, pool: list):
        self.rng = np.random.default_rng(seed)
        self.reset(pool)

    def reset(self, pool: list) -> None:
        self.pool = list(pool)
        self.perm: list = []

    def draw(self, k: int) -> list:
        if not self.pool:
            raise ValueError("cannot sample from an empty set")
        out = []
        while len(out) < k:
            if not self.perm:
                self.perm = [self.pool[i] for i in self.rng.permutation(len(self.pool))]
            take = min(k - len(out), len(self.perm))
            out += self.perm[:take]
            self.perm = self.perm[take:]
        return out


@dataclass
class SSLState:
    teacher: ParamVector
    student: Optional[ParamVector]
    opt: AdamState
    labeled: dict  # sample_id -> mask, insertion ordered
    unlabeled: list
    pseudo_ids: set = field(default_factory=set)
    iter: int = 0
    epoch: int = 0
    promotion_log: list = field(default_factory=list)
    provenance: Counter = field(default_factory=Counter)
    tscs_epoch: Optional[int] = None
    tscs_done: bool = False
    total_epochs: int = 0
    # sampling
    labeled_sampler: Optional[_StreamSampler] = None
    epoch_perm: list = field(default_factory=list)
    epoch_pos: int = 0
    epoch_len: int = 0
    iter_in_epoch: int = 0
    epoch_rng: Optional[np.random.Generator] = None
    last_checkpoint: Optional[str] = None

    @property
    def n_total(self) -> int:
        return len(self.labeled) + len(self.unlabeled)


@dataclass
class RunResult:
    state: SSLState
    log: list
    report: object
    eval_history: list


def init_state(config: TrainConfig, dataset: Dataset, d_l: list, d_u: list) -> SSLState:
    params = init_params(config.model_config(len(dataset.vocab)))
    labeled = {s.sample_id: np.asarray(s.gt_mask, dtype=bool) for s in d_l}
    state = SSLState(
        teacher=params,
        student=None,
        opt=AdamState.fresh(params),
        labeled=labeled,
        unlabeled=[s.sample_id for s in d_u],
    )
    state.labeled_sampler = _StreamSampler(_seed_of(config.seed, 1), list(labeled))
    state.epoch_rng = np.random.default_rng(_seed_of(config.seed, 2))
    return state


# ---------------------------------------------------------------------------
# Building blocks


def _labeled_views(config, dataset, ids, it):
    views = []
    for slot, sid in enumerate(ids):
        scene = dataset.scenes[dataset.samples[sid].scene_id]
        seed = _seed_of(config.seed, it, 11, slot)
        views.append(strong_augment(scene, seed) if config.labeled_strong_aug else weak_augment(scene, seed))
    return views


def supervised_batch(params, config, dataset, labeled: dict, ids, it):
    """Mean supervised loss over a labeled batch, and its parameter gradient."""
    views = _labeled_views(config, dataset, ids, it)
    items = [(v, dataset.samples[sid].tokens) for v, sid in zip(views, ids)]
    preds, batch = forward_batch(params, items)
    w = config.weights
    losses, ups = [], []
    for v, sid, p in zip(views, ids, preds):
        gt = restrict_mask(labeled[sid], v)
        iou = mask_iou(p.hard_mask, gt)
        losses.append(supervised_loss(p, gt, w, iou_target=iou))
        up = supervised_grad(p, v.superpoint_id, gt, w, iou_target=iou)
        up.superpoint_logits = up.superpoint_logits / len(ids)
        up.score = up.score / len(ids)
        ups.append(up)
    grad = backward_batch(params, batch, ups)
    return losses, grad


def teacher_pseudo_labels(teacher, config, dataset, ids, it):
    """Teacher predictions on weak views: (hard mask on all points, attention block, score)."""
    views = []
    for slot, sid in enumerate(ids):
        scene = dataset.scenes[dataset.samples[sid].scene_id]
        views.append(weak_augment(scene, _seed_of(config.seed, it, 21, slot)))
    preds, _ = forward_batch(teacher, [(v, dataset.samples[sid].tokens) for v, sid in zip(views, ids)])
    return [(p.hard_mask.copy(), p.attn_features.copy(), p.score) for p in preds]


def unsupervised_batch(student, config, dataset, ids, pseudo, it):
    """Mean unsupervised loss over strong views, its gradient, and the per-sample weights."""
    views = []
    for slot, sid in enumerate(ids):
        scene = dataset.scenes[dataset.samples[sid].scene_id]
        views.append(strong_augment(scene, _seed_of(config.seed, it, 31, slot)))
    preds, batch = forward_batch(student, [(v, dataset.samples[sid].tokens) for v, sid in zip(views, ids)])
    w = config.weights
    losses, ups, lam = [], [], []
    for v, p, (mask_t, f_t, score_t) in zip(views, preds, pseudo):
        target = restrict_mask(mask_t, v)
        f_aligned = f_t[v.superpoint_kept]
        if config.skip_empty_pseudo and not mask_t.any():
            # a referring expression always has a referent; an empty mask is no label
            lw = 0.0
        elif config.predicted_weight:
            lw = float(score_t)
        elif config.enable_qdw:
            lw = mask_iou(p.hard_mask, target)
        else:
            lw = 1.0
        lam.append(lw)
        losses.append(unsupervised_loss(p, target, f_aligned, w, lambda_weight=lw))
        up = unsupervised_grad(p, v.superpoint_id, target, f_aligned, w, lambda_weight=lw)
        up.superpoint_logits = up.superpoint_logits / len(ids)
        up.attn_features = up.attn_features / len(ids)
        ups.append(up)
    grad = backward_batch(student, batch, ups)
    return losses, grad, lam


def _mean_components(losses) -> dict:
    if not losses:
        return {}
    names = losses[0].components.keys()
    out = {n: float(np.mean([l.raw(n) for l in losses])) for n in names}
    out["total"] = float(np.mean([l.total for l in losses]))
    return out


def _check_finite(value: float, state: SSLState, what: str) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(
            f"non-finite {what} at iter {state.iter}; last good checkpoint: {state.last_checkpoint or 'none'}"
        )


# ---------------------------------------------------------------------------
# Phase operations


def burn_in_step(state: SSLState, config: TrainConfig, dataset: Dataset, batch_ids=None) -> dict:
    if state.student is not None or state.iter >= config.burn_in_iters:
        raise RuntimeError("burn-in is over")
    if not state.labeled:
        raise ValueError("labeled set is empty")
    ids = batch_ids if batch_ids is not None else state.labeled_sampler.draw(config.batch_labeled)
    losses, grad = supervised_batch(state.teacher, config, dataset, state.labeled, ids, state.iter)
    sup = _mean_components(losses)
    _check_finite(sup["total"], state, "supervised loss")
    state.teacher, state.opt = adamw_step(state.teacher, grad, state.opt, config.lr, config.weight_decay)
    state.provenance["teacher:burn_in"] += 1
    return {"phase": "burn_in", "sup": sup, "unsup": {}, "lambda": []}


def init_student(state: SSLState, config: TrainConfig) -> None:
    if state.student is not None:
        raise RuntimeError("student already initialised")
    state.student = state.teacher.copy()
    state.opt = AdamState.fresh(state.student)
    state.provenance["student:init"] += 1
    # epoch bookkeeping for the mutual-learning phase
    state.epoch = 0
    state.total_epochs = max(1, math.ceil(max(config.total_iters - config.burn_in_iters - 1, 1) / _epoch_len(state, config)))
    state.tscs_epoch = resolve_tscs_epoch(config, state.total_epochs)
    _start_epoch(state, config)


def resolve_tscs_epoch(config: TrainConfig, total_epochs: int) -> Optional[int]:
    if not (config.ssl_enabled and config.enable_tscs) or config.tscs_period == "never":
        return None
    if str(config.tscs_period).isdigit():
        return int(config.tscs_period)
    k = int(round(TSCS_PERIODS[config.tscs_period] * total_epochs))
    return min(max(k, 1), max(total_epochs - 1, 1))


def _epoch_len(state: SSLState, config: TrainConfig) -> int:
    if state.unlabeled:
        return math.ceil(len(state.unlabeled) / config.batch_unlabeled)
    return math.ceil(len(state.labeled) / config.batch_labeled)


def _start_epoch(state: SSLState, config: TrainConfig) -> None:
    pool = state.unlabeled
    state.epoch_perm = [pool[i] for i in state.epoch_rng.permutation(len(pool))] if pool else []
    state.epoch_pos = 0
    state.iter_in_epoch = 0
    state.epoch_len = _epoch_len(state, config)


def _next_unlabeled(state: SSLState, config: TrainConfig) -> list:
    ids = state.epoch_perm[state.epoch_pos : state.epoch_pos + config.batch_unlabeled]
    state.epoch_pos += len(ids)
    return ids


def mutual_step(state: SSLState, config: TrainConfig, dataset: Dataset, labeled_ids=None, unlabeled_ids=None) -> dict:
    """One student update on labeled + pseudo-labeled data, then the EMA teacher update."""
    if state.student is None:
        raise RuntimeError("init_student must run before mutual learning")
    ids_l = labeled_ids if labeled_ids is not None else state.labeled_sampler.draw(config.batch_labeled)
    if not ids_l:
        raise ValueError("empty labeled batch")
    ids_u = unlabeled_ids if unlabeled_ids is not None else _next_unlabeled(state, config)
    it = state.iter

    sup_losses, grad = supervised_batch(state.student, config, dataset, state.labeled, ids_l, it)
    sup = _mean_components(sup_losses)
    _check_finite(sup["total"], state, "supervised loss")

    unsup, lam = {}, []
    if config.ssl_enabled and ids_u:
        pseudo = teacher_pseudo_labels(state.teacher, config, dataset, ids_u, it)
        un_losses, g_un, lam = unsupervised_batch(state.student, config, dataset, ids_u, pseudo, it)
        unsup = _mean_components(un_losses)
        _check_finite(unsup["total"], state, "unsupervised loss")
        if config.lambda_u != 0.0:
            grad = grad.like(grad.values + config.lambda_u * g_un.values)

    state.student, state.opt = adamw_step(state.student, grad, state.opt, config.lr, config.weight_decay)
    state.provenance["student:optimizer"] += 1
    teacher_prev = state.teacher
    if config.ssl_enabled:
        a = config.ema_alpha
        state.teacher = teacher_prev.like(a * teacher_prev.values + (1.0 - a) * state.student.values)
        state.provenance["teacher:ema"] += 1
    return {"phase": "mutual", "sup": sup, "unsup": unsup, "lambda": lam, "teacher_prev": teacher_prev}


def predict_hard_masks(params: ParamVector, dataset: Dataset, ids: list, chunk: int = 64) -> list:
    out = []
    for i in range(0, len(ids), chunk):
        part = ids[i : i + chunk]
        items = [(identity_view(dataset.scenes[dataset.samples[s].scene_id]), dataset.samples[s].tokens) for s in part]
        preds, _ = forward_batch(params, items)
        out += [p.hard_mask.copy() for p in preds]
    return out


def tscs_event(state: SSLState, config: TrainConfig, dataset: Dataset, predict: Callable = predict_hard_masks) -> list:
    """Promote unlabeled samples whose teacher/student mask IoU exceeds the threshold.

    ``predict(params, dataset, ids)`` returns un-augmented hard masks; tests
    may substitute their own.
    """
    if not state.unlabeled:
        return []
    ids = list(state.unlabeled)
    t_masks = predict(state.teacher, dataset, ids)
    s_masks = predict(state.student, dataset, ids)
    promoted = []
    for sid, mt, ms in zip(ids, t_masks, s_masks):
        correl = mask_iou(ms, mt)
        if config.skip_empty_pseudo and not np.any(mt):
            continue
        if correl > config.tscs_threshold:
            promoted.append((state.iter, sid, correl))
            state.labeled[sid] = np.asarray(mt, dtype=bool).copy()
            state.pseudo_ids.add(sid)
    gone = {p[1] for p in promoted}
    state.unlabeled = [s for s in state.unlabeled if s not in gone]
    state.promotion_log += promoted
    state.labeled_sampler.reset(list(state.labeled))
    state.tscs_done = True
    return promoted


# ---------------------------------------------------------------------------
# Full run

LOG_FIELDS = [
    "iter", "epoch", "phase",
    "sup_bce", "sup_dice", "sup_rel", "sup_score", "sup_total",
    "unsup_bce", "unsup_dice", "unsup_attn", "unsup_total",
    "mean_lambda_weight", "n_labeled", "n_unlabeled", "promotions_this_epoch", "eval_miou",
]


def _eval_params(state: SSLState, config: TrainConfig) -> ParamVector:
    if state.student is None:
        return state.teacher
    if not config.ssl_enabled or config.eval_model == "student":
        return state.student
    return state.teacher


def run(
    config: TrainConfig,
    dataset: Dataset,
    split: Optional[tuple] = None,
    out_dir=None,
    callback: Optional[Callable] = None,
    eval_samples: Optional[list] = None,
) -> RunResult:
    """Train end to end; ``callback(event, state, info)`` observes every step."""
    if split is None:
        split = make_splits(dataset.samples, SplitSpec(config.labeled_ratio, config.seed))
    d_l, d_u = split
    eval_samples = dataset.val_samples if eval_samples is None else eval_samples
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    mcfg = config.model_config(len(dataset.vocab))
    state = init_state(config, dataset, d_l, d_u)
    rows, history = [], []
    promotions_this_epoch = 0
    notify = callback or (lambda *a: None)

    def checkpoint(tag):
        if out is None:
            return
        path = out / f"{tag}_teacher.ckpt"
        save_checkpoint(path, state.teacher, mcfg, {"iter": state.iter, "role": "teacher"})
        if state.student is not None:
            save_checkpoint(out / f"{tag}_student.ckpt", state.student, mcfg, {"iter": state.iter, "role": "student"})
        state.last_checkpoint = str(path)

    def snapshot():
        if not eval_samples:
            return None
        rep = evaluate(_eval_params(state, config), eval_samples, dataset.scenes)
        history.append((state.iter, state.epoch, rep))
        notify("eval", state, {"report": rep})
        return rep.overall.miou

    for i in range(config.total_iters):
        state.iter = i
        eval_miou = None
        if i < config.burn_in_iters:
            info = burn_in_step(state, config, dataset)
        elif i == config.burn_in_iters:
            checkpoint("burn_in")
            init_student(state, config)
            notify("init_student", state, {})
            continue
        else:
            if state.iter_in_epoch >= state.epoch_len:
                state.epoch += 1
                notify("epoch", state, {"promotions": promotions_this_epoch})
                promotions_this_epoch = 0
                if state.tscs_epoch is not None and not state.tscs_done and state.epoch >= state.tscs_epoch:
                    promoted = tscs_event(state, config, dataset)
                    promotions_this_epoch = len(promoted)
                    log.info("TSCS at epoch %d promoted %d samples", state.epoch, len(promoted))
                    notify("tscs", state, {"promoted": promoted})
                    checkpoint("tscs")
                _start_epoch(state, config)
                if config.eval_every and state.epoch % config.eval_every == 0:
                    eval_miou = snapshot()
            info = mutual_step(state, config, dataset)
            state.iter_in_epoch += 1
        notify(info["phase"], state, info)
        sup, unsup, lam = info["sup"], info["unsup"], info["lambda"]
        rows.append(
            {
                "iter": i,
                "epoch": state.epoch,
                "phase": info["phase"],
                "sup_bce": sup.get("bce"),
                "sup_dice": sup.get("dice"),
                "sup_rel": sup.get("rel"),
                "sup_score": sup.get("score"),
                "sup_total": sup.get("total"),
                "unsup_bce": unsup.get("bce"),
                "unsup_dice": unsup.get("dice"),
                "unsup_attn": unsup.get("attn"),
                "unsup_total": unsup.get("total"),
                "mean_lambda_weight": float(np.mean(lam)) if lam else None,
                "n_labeled": len(state.labeled),
                "n_unlabeled": len(state.unlabeled),
                "promotions_this_epoch": promotions_this_epoch,
                "eval_miou": eval_miou,
            }
        )

    state.iter = config.total_iters
    checkpoint("final")
    report = evaluate(_eval_params(state, config), eval_samples, dataset.scenes) if eval_samples else None
    if out is not None:
        write_log(out / "train_log.csv", rows)
    return RunResult(state=state, log=rows, report=report, eval_history=history)


def write_log(path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k])) for k in LOG_FIELDS})
