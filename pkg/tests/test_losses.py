import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rest3d.losses import (
    LossBreakdown,
    LossWeights,
    attn_grad,
    attn_loss,
    bce_grad,
    bce_loss,
    dice_grad,
    dice_loss,
    mask_iou,
    score_loss,
    supervised_loss,
    unsupervised_grad,
    unsupervised_loss,
)
from rest3d.model import Prediction


def _bits(idx, n=8):
    m = np.zeros(n, dtype=bool)
    m[list(idx)] = True
    return m


def _pred(probs, attn=None, score=0.5):
    probs = np.asarray(probs, dtype=float)
    logits = np.log(probs / (1 - probs))
    return Prediction(
        superpoint_logits=logits,
        point_probs=probs,
        hard_mask=probs > 0.5,
        attn_features=np.zeros((len(probs), 2)) if attn is None else np.asarray(attn, float),
        score=score,
    )


# -- IoU -------------------------------------------------------------------


def test_iou_examples():
    assert mask_iou(_bits([1, 2, 3]), _bits([2, 3, 4])) == 0.5
    assert mask_iou(_bits([1, 2]), _bits([1, 2])) == 1.0
    assert mask_iou(_bits([1]), _bits([5])) == 0.0
    assert mask_iou(np.zeros(4, bool), np.zeros(4, bool)) == 1.0


def test_iou_length_mismatch():
    with pytest.raises(ValueError):
        mask_iou(np.zeros(3, bool), np.zeros(4, bool))


masks = arrays(np.bool_, st.integers(1, 40))


@given(st.data())
def test_iou_properties(data):
    n = data.draw(st.integers(1, 40))
    a = data.draw(arrays(np.bool_, n))
    b = data.draw(arrays(np.bool_, n))
    v = mask_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == mask_iou(b, a)
    if a.any() or b.any():
        assert (v == 1.0) == bool(np.array_equal(a, b))
    agree = np.flatnonzero(a == b)
    if len(agree):
        j = data.draw(st.sampled_from(list(agree)))
        b2 = b.copy()
        b2[j] = ~b2[j]
        assert mask_iou(a, b2) <= v


# -- BCE / Dice / attention / score -----------------------------------------


def test_bce_examples():
    assert abs(bce_loss(np.full(5, 0.5), _bits([0, 3], 5)) - math.log(2)) < 1e-9
    assert abs(bce_loss([0.9, 0.2], [1, 0]) - (-(math.log(0.9) + math.log(0.8)) / 2)) < 1e-12
    eps = 1e-7
    assert bce_loss([1.0, 0.0], [1, 0]) <= -math.log(1 - eps) + 1e-15


def test_dice_examples():
    assert dice_loss(np.ones(6), np.ones(6, bool)) == 0.0
    assert dice_loss(np.zeros(3), np.zeros(3, bool)) == 0.0
    assert dice_loss([1, 1, 0, 0], [1, 0, 0, 0]) == 0.25


def test_attn_examples():
    assert attn_loss([[1.0, 2.0]], [[0.0, 0.0]]) == 2.5
    f = np.arange(6.0).reshape(3, 2)
    assert attn_loss(f, f) == 0.0
    assert abs(attn_loss(f + 0.3, f) - 0.09) < 1e-15
    with pytest.raises(ValueError):
        attn_loss(np.zeros((2, 2)), np.zeros((3, 2)))


def test_score_examples():
    m = _bits([1, 2])
    assert score_loss(1.0, m, m) == 0.0
    assert score_loss(0.5, _bits([1, 2, 3]), _bits([2, 3, 4])) == 0.0
    assert abs(score_loss(0.2, _bits([1, 2, 3]), _bits([2, 3, 4])) - 0.09) < 1e-15


@given(
    arrays(np.float64, 7, elements=st.floats(0.0, 1.0)),
    arrays(np.bool_, 7),
)
def test_loss_ranges(p, t):
    assert bce_loss(p, t) >= 0
    d = dice_loss(p, t)
    assert 0.0 <= d < 1.0


@pytest.mark.parametrize("fn,grad", [(bce_loss, bce_grad), (dice_loss, dice_grad)])
def test_mask_loss_gradients(fn, grad, rng):
    for _ in range(10):
        p = rng.uniform(0.05, 0.95, size=9)
        t = rng.random(9) < 0.4
        g = grad(p, t)
        h = 1e-6
        for i in range(len(p)):
            e = np.zeros_like(p)
            e[i] = h
            fd = (fn(p + e, t) - fn(p - e, t)) / (2 * h)
            assert abs(fd - g[i]) <= 1e-6 + 1e-4 * abs(fd)


def test_attn_gradient(rng):
    fs, ft = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    g = attn_grad(fs, ft)
    h = 1e-6
    for idx in np.ndindex(fs.shape):
        e = np.zeros_like(fs)
        e[idx] = h
        fd = (attn_loss(fs + e, ft) - attn_loss(fs - e, ft)) / (2 * h)
        assert abs(fd - g[idx]) < 1e-8


# -- composite losses ---------------------------------------------------------


def test_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.sup_bce, w.sup_dice, w.sup_rel, w.sup_score, w.unsup_attn, w.lambda_u) == (1, 1, 0, 0.5, 0.1, 0.5)
    with pytest.raises(ValueError):
        LossWeights(sup_bce=-1)


def test_supervised_perfect_prediction():
    gt = _bits([0, 1], 4)
    pred = _pred(np.where(gt, 1 - 1e-9, 1e-9), score=1.0)
    br = supervised_loss(pred, gt, LossWeights())
    assert br.total < 1e-5


def test_supervised_zero_weights():
    pred = _pred([0.3, 0.8, 0.6, 0.1])
    w = LossWeights(sup_bce=0, sup_dice=0, sup_score=0)
    assert supervised_loss(pred, _bits([0], 4), w).total == 0.0


def test_supervised_composes_hand_values():
    # bce: probs [0.9,0.2,0.5,0.5] vs [1,0,1,0]; dice: (2*1.4+1)/(2.1+2+1)
    probs = np.array([0.9, 0.2, 0.5, 0.5])
    gt = np.array([1, 0, 1, 0], bool)
    pred = _pred(probs, score=0.3)
    w = LossWeights(sup_bce=1, sup_dice=1, sup_score=1)
    bce = -(math.log(0.9) + math.log(0.8) + 2 * math.log(0.5)) / 4
    dice = 1 - (2 * 1.4 + 1) / (2.1 + 2 + 1)
    iou = 1 / 2  # hard mask {0} vs gt {0, 2}
    expected = bce + dice + (0.3 - iou) ** 2
    assert abs(supervised_loss(pred, gt, w).total - expected) < 1e-12


def test_breakdown_total_reconstruction():
    br = LossBreakdown.from_components({"a": (0.3, 2.0), "b": (1.1, 0.25), "c": (7.0, 0.0)})
    assert abs(br.total - (0.6 + 0.275)) < 1e-12
    assert br.raw("a") == 0.3 and br.weight("b") == 0.25


def test_unsupervised_weight_boundaries():
    probs = np.array([0.9, 0.8, 0.1, 0.2])
    f = np.ones((4, 2))
    ft = np.zeros((4, 2))
    w = LossWeights()
    same = unsupervised_loss(_pred(probs, f), probs > 0.5, ft, w)
    assert same.weight("bce") == 1.0 and same.weight("dice") == 1.0
    assert abs(same.total - (same.raw("bce") + same.raw("dice") + 0.1 * 1.0)) < 1e-12
    disjoint = unsupervised_loss(_pred(probs, f), ~(probs > 0.5), ft, w)
    assert disjoint.weight("bce") == 0.0
    assert abs(disjoint.total - 0.1 * attn_loss(f, ft)) < 1e-12


def test_unsupervised_half_weight():
    probs = np.array([0.9, 0.8, 0.7, 0.1])  # hard {0,1,2}
    pseudo = np.array([0, 1, 1, 1], bool)  # IoU 2/4
    pred = _pred(probs)
    w = LossWeights(unsup_attn=0.0)
    weighted = unsupervised_loss(pred, pseudo, pred.attn_features, w)
    plain = unsupervised_loss(pred, pseudo, pred.attn_features, w, lambda_weight=1.0)
    assert weighted.weight("bce") == 0.5
    assert weighted.total == 0.5 * plain.total


def test_unsupervised_weight_is_constant():
    # perturbing the teacher mask changes the weight, but the gradient is
    # exactly weight * (unweighted gradient): nothing flows through the weight
    probs = np.array([0.9, 0.8, 0.7, 0.1])
    pred = _pred(probs)
    sp = np.arange(4)
    for pseudo in ([0, 1, 1, 1], [1, 1, 0, 0], [1, 1, 1, 0]):
        pseudo = np.array(pseudo, bool)
        lam = mask_iou(pred.hard_mask, pseudo)
        g = unsupervised_grad(pred, sp, pseudo, pred.attn_features, LossWeights())
        g1 = unsupervised_grad(pred, sp, pseudo, pred.attn_features, LossWeights(), lambda_weight=1.0)
        np.testing.assert_allclose(g.superpoint_logits, lam * g1.superpoint_logits, rtol=1e-14, atol=1e-18)
