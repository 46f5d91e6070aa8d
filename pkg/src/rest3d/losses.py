"""Mask losses, the IoU primitive, and the supervised/unsupervised objectives.

Each loss has a value function and a ``*_grad`` twin giving the derivative
with respect to its first argument. The composite objectives return a
:class:`LossBreakdown` for logging and an :class:`~rest3d.model.OutputGrad`
to feed the network's reverse pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import OutputGrad, Prediction

BCE_EPS = 1e-7
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossWeights:
    sup_bce: float = 1.0
    sup_dice: float = 1.0
    sup_rel: float = 0.0
    sup_score: float = 0.5
    unsup_attn: float = 0.1
    lambda_u: float = 0.5

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class LossBreakdown:
    total: float
    components: dict = field(default_factory=dict)  # name -> (raw value, applied weight)

    @classmethod
    def from_components(cls, components: dict) -> "LossBreakdown":
        total = float(sum(raw * w for raw, w in components.values()))
        return cls(total, dict(components))

    def raw(self, name: str) -> float:
        return self.components[name][0]

    def weight(self, name: str) -> float:
        return self.components[name][1]


def _check_lengths(a, b) -> None:
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")


def mask_iou(a, b) -> float:
    """|a & b| / |a | b|; two empty masks count as perfect agreement."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _check_lengths(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def bce_loss(probs, target) -> float:
    _check_lengths(probs, target)
    p = np.clip(np.asarray(probs, dtype=float), BCE_EPS, 1 - BCE_EPS)
    t = np.asarray(target, dtype=float)
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))


def bce_grad(probs, target) -> np.ndarray:
    _check_lengths(probs, target)
    raw = np.asarray(probs, dtype=float)
    p = np.clip(raw, BCE_EPS, 1 - BCE_EPS)
    t = np.asarray(target, dtype=float)
    g = (-t / p + (1 - t) / (1 - p)) / len(p)
    # clamp is flat outside [eps, 1-eps]
    g[(raw < BCE_EPS) | (raw > 1 - BCE_EPS)] = 0.0
    return g


def dice_loss(probs, target) -> float:
    _check_lengths(probs, target)
    p = np.asarray(probs, dtype=float)
    t = np.asarray(target, dtype=float)
    return float(1.0 - (2.0 * np.dot(p, t) + DICE_SMOOTH) / (p.sum() + t.sum() + DICE_SMOOTH))


def dice_grad(probs, target) -> np.ndarray:
    _check_lengths(probs, target)
    p = np.asarray(probs, dtype=float)
    t = np.asarray(target, dtype=float)
    num = 2.0 * np.dot(p, t) + DICE_SMOOTH
    den = p.sum() + t.sum() + DICE_SMOOTH
    return -(2.0 * t * den - num) / den**2


def attn_loss(f_student, f_teacher) -> float:
    f_student = np.asarray(f_student, dtype=float)
    f_teacher = np.asarray(f_teacher, dtype=float)
    if f_student.shape != f_teacher.shape:
        raise ValueError(f"shape mismatch: {f_student.shape} vs {f_teacher.shape}")
    if f_student.size == 0:
        return 0.0
    return float(np.mean((f_student - f_teacher) ** 2))


def attn_grad(f_student, f_teacher) -> np.ndarray:
    f_student = np.asarray(f_student, dtype=float)
    if f_student.size == 0:
        return np.zeros_like(f_student)
    return 2.0 * (f_student - np.asarray(f_teacher, dtype=float)) / f_student.size


def score_loss(predicted_score: float, pred_hard_mask, gt_mask, iou_target: Optional[float] = None) -> float:
    if iou_target is None:
        iou_target = mask_iou(pred_hard_mask, gt_mask)
    else:
        _check_lengths(pred_hard_mask, gt_mask)
    return float((predicted_score - iou_target) ** 2)


def _probs_to_logit_grad(pred: Prediction, point_sp: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Chain d/dprobs through the sigmoid and the superpoint broadcast."""
    p = pred.point_probs
    dz_point = dprobs * p * (1.0 - p)
    return np.bincount(point_sp, dz_point, minlength=len(pred.superpoint_logits))


def supervised_loss(pred: Prediction, gt_mask, weights: LossWeights = LossWeights(), iou_target=None) -> LossBreakdown:
    gt = np.asarray(gt_mask, dtype=bool)
    _check_lengths(pred.point_probs, gt)
    if iou_target is None:
        iou_target = mask_iou(pred.hard_mask, gt)
    return LossBreakdown.from_components(
        {
            "bce": (bce_loss(pred.point_probs, gt), weights.sup_bce),
            "dice": (dice_loss(pred.point_probs, gt), weights.sup_dice),
            # relation loss belongs to the original backbone; always absent here
            "rel": (0.0, weights.sup_rel),
            "score": (score_loss(pred.score, pred.hard_mask, gt, iou_target), weights.sup_score),
        }
    )


def supervised_grad(pred: Prediction, point_sp, gt_mask, weights: LossWeights = LossWeights(), iou_target=None) -> OutputGrad:
    gt = np.asarray(gt_mask, dtype=bool)
    if iou_target is None:
        iou_target = mask_iou(pred.hard_mask, gt)
    dprobs = weights.sup_bce * bce_grad(pred.point_probs, gt) + weights.sup_dice * dice_grad(pred.point_probs, gt)
    return OutputGrad(
        superpoint_logits=_probs_to_logit_grad(pred, point_sp, dprobs),
        attn_features=None,
        score=weights.sup_score * 2.0 * (pred.score - iou_target),
    )


def unsupervised_loss(
    pred_s: Prediction,
    pseudo,
    f_teacher,
    weights: LossWeights = LossWeights(),
    lambda_weight: Optional[float] = None,
) -> LossBreakdown:
    """Quality-weighted BCE + Dice against the teacher mask, plus feature MSE.

    ``lambda_weight`` defaults to the IoU between the student's hard mask and
    the pseudo mask; pass 1.0 to disable the weighting.
    """
    pseudo = np.asarray(pseudo, dtype=bool)
    _check_lengths(pred_s.point_probs, pseudo)
    if lambda_weight is None:
        lambda_weight = mask_iou(pred_s.hard_mask, pseudo)
    return LossBreakdown.from_components(
        {
            "bce": (bce_loss(pred_s.point_probs, pseudo), lambda_weight),
            "dice": (dice_loss(pred_s.point_probs, pseudo), lambda_weight),
            "attn": (attn_loss(pred_s.attn_features, f_teacher), weights.unsup_attn),
        }
    )


def unsupervised_grad(
    pred_s: Prediction,
    point_sp,
    pseudo,
    f_teacher,
    weights: LossWeights = LossWeights(),
    lambda_weight: Optional[float] = None,
) -> OutputGrad:
    pseudo = np.asarray(pseudo, dtype=bool)
    if lambda_weight is None:
        lambda_weight = mask_iou(pred_s.hard_mask, pseudo)
    dprobs = lambda_weight * (bce_grad(pred_s.point_probs, pseudo) + dice_grad(pred_s.point_probs, pseudo))
    return OutputGrad(
        superpoint_logits=_probs_to_logit_grad(pred_s, point_sp, dprobs),
        attn_features=weights.unsup_attn * attn_grad(pred_s.attn_features, f_teacher),
        score=0.0,
    )
