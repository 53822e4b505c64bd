from __future__ import annotations

import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occuray.losses import (
    LossConfig,
    RoiLoss,
    SampleLosses,
    bce_mask_grad,
    bce_mask_loss,
    grad_check,
    run_loss_cases,
    seg_loss,
    seg_loss_grad,
    total_loss,
)


def direct_bce(pred, target, eps=1e-7):
    """Plain per-pixel summation."""
    terms = []
    for p, t in zip(np.ravel(pred), np.ravel(target)):
        p = min(max(float(p), eps), 1 - eps)
        terms.append(t * math.log(p) + (1 - t) * math.log(1 - p))
    return -math.fsum(terms) / len(terms)


def test_uniform_half_is_ln2():
    rng = np.random.default_rng(0)
    target = rng.random((7, 5)) < 0.5
    assert abs(bce_mask_loss(np.full((7, 5), 0.5), target) - math.log(2)) <= 1e-12


def test_two_by_two_example():
    pred = np.array([[0.9, 0.1], [0.8, 0.2]])
    target = np.array([[1, 0], [1, 0]])
    expected = -(math.log(0.9) * 2 + math.log(0.8) * 2) / 4
    assert abs(bce_mask_loss(pred, target) - 0.164252) <= 1e-6
    assert abs(bce_mask_loss(pred, target) - expected) <= 1e-15


def test_perfect_prediction_is_clamp_bounded():
    t = np.array([[1.0, 0.0], [0.0, 1.0]])
    v = bce_mask_loss(t, t)
    assert 0 <= v <= -math.log(1 - 1e-7) + 1e-15


def test_matches_direct_summation():
    rng = np.random.default_rng(1)
    for _ in range(50):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=2))
        p = rng.random(shape)
        t = (rng.random(shape) < 0.5).astype(float)
        assert abs(bce_mask_loss(p, t) - direct_bce(p, t)) <= 1e-12


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        bce_mask_loss(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        bce_mask_loss(np.full((2, 2), 1.5), np.zeros((2, 2)))


def test_seg_loss_arithmetic():
    # occludee term 0.8, occluder term 0.4, weight 0.25
    assert 0.8 + LossConfig().lam * 0.4 == 0.9
    p = np.full((2, 2), 0.5)
    t = np.zeros((2, 2))
    occludee = bce_mask_loss(p, t)
    assert seg_loss(p, t, p, t) == occludee + 0.25 * occludee


def test_seg_loss_lambda_zero_is_occludee_only():
    rng = np.random.default_rng(2)
    p, t = rng.random((3, 3)), rng.random((3, 3)) < 0.5
    q, s = rng.random((3, 3)), rng.random((3, 3)) < 0.5
    assert seg_loss(p, t, q, s, LossConfig(lam=0.0)) == bce_mask_loss(p, t)


def test_seg_loss_perfect_occludee_uniform_occluder():
    t = np.array([[1.0, 0.0], [1.0, 1.0]])
    v = seg_loss(t, t, np.full((2, 2), 0.5), np.array([[0, 1], [0, 0]]))
    assert abs(v - 0.25 * math.log(2)) <= 1e-6


def test_missing_occluder_modes():
    p = np.full((2, 2), 0.3)
    t = np.zeros((2, 2))
    q = np.full((2, 2), 0.2)
    zero = seg_loss(p, t, q, None)
    assert zero == bce_mask_loss(p, t) + 0.25 * bce_mask_loss(q, np.zeros((2, 2)))
    assert seg_loss(p, t, q, None, LossConfig(missing_occluder="skip")) == bce_mask_loss(p, t)
    _, g = seg_loss_grad(p, t, q, None, LossConfig(missing_occluder="skip"))
    assert not g.any()


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 3), st.floats(0, 3), st.integers(0, 2**32 - 1))
def test_seg_loss_affine_in_lambda(l1, l2, seed):
    rng = np.random.default_rng(seed)
    p, t = rng.uniform(0.01, 0.99, (3, 3)), rng.random((3, 3)) < 0.5
    q, s = rng.uniform(0.01, 0.99, (3, 3)), rng.random((3, 3)) < 0.5
    d = seg_loss(p, t, q, s, LossConfig(lam=l2)) - seg_loss(p, t, q, s, LossConfig(lam=l1))
    assert d == pytest.approx((l2 - l1) * bce_mask_loss(q, s), abs=1e-12)


def test_config_validation():
    for bad in ({"lam": -1}, {"epsilon": 0}, {"epsilon": 0.5}, {"missing_occluder": "drop"}):
        with pytest.raises(ValueError):
            LossConfig(**bad)


# ---------------------------------------------------------------------------
# total loss


def test_total_loss_example():
    s = SampleLosses(rpn=[0.2], rois=[RoiLoss(0.1, 0.4, 0.6, True), RoiLoss(0.3, 0.7, 0.9, False)])
    assert total_loss(s) == 0.9


def test_total_loss_zero_and_empty():
    assert total_loss(SampleLosses([0.0, 0.0], [RoiLoss(0, 0, 0, True)])) == 0.0
    assert total_loss(SampleLosses()) == 0.0
    assert total_loss(SampleLosses(rpn=[0.4, 0.2])) == pytest.approx(0.3, abs=1e-16)


def test_total_loss_matches_resummation():
    rng = np.random.default_rng(3)
    for _ in range(3):
        rpn = list(rng.random(int(rng.integers(1, 6))))
        rois = [RoiLoss(*rng.random(3), bool(rng.random() < 0.5)) for _ in range(int(rng.integers(1, 8)))]
        expected = sum(rpn) / len(rpn) + sum(r.cls + (r.reg + r.seg if r.positive else 0) for r in rois) / len(rois)
        assert total_loss(SampleLosses(rpn, rois)) == pytest.approx(expected, abs=1e-15)


def test_total_loss_permutation_invariant():
    rng = np.random.default_rng(4)
    rpn = list(rng.random(9))
    rois = [RoiLoss(*rng.random(3), bool(rng.random() < 0.5)) for _ in range(15)]
    base = total_loss(SampleLosses(rpn, rois))
    shuffler = random.Random(0)
    for _ in range(20):
        shuffler.shuffle(rpn)
        shuffler.shuffle(rois)
        assert total_loss(SampleLosses(rpn, rois)) == base


def test_sample_losses_reject_bad_terms():
    with pytest.raises(ValueError):
        SampleLosses([float("nan")])
    with pytest.raises(ValueError):
        SampleLosses([], [RoiLoss(-0.1, 0, 0, True)])


# ---------------------------------------------------------------------------
# gradients


def test_bce_grad_formula():
    p = np.array([[0.3, 0.6], [0.9, 0.2]])
    t = np.array([[1, 0], [1, 0]])
    assert np.allclose(bce_mask_grad(p, t), (p - t) / (p * (1 - p) * 4), rtol=0, atol=1e-15)


def test_bce_grad_zero_in_clamp():
    g = bce_mask_grad(np.array([0.0, 1.0, 0.5]), np.array([1.0, 0.0, 1.0]))
    assert g[0] == 0 and g[1] == 0 and g[2] != 0


def test_grad_check_uniform_half():
    rng = np.random.default_rng(5)
    point = {"pred": np.full((4, 4), 0.5), "target": (rng.random((4, 4)) < 0.5).astype(float)}
    assert grad_check("bce", point, {"pred": rng.standard_normal((4, 4))}) <= 1e-6


def test_grad_check_random_interior_points():
    rng = np.random.default_rng(6)
    worst = 0.0
    for k in range(100):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=2))
        if k % 2:
            point = {"pred": rng.uniform(0.02, 0.98, shape), "target": (rng.random(shape) < 0.5).astype(float)}
            err = grad_check("bce", point, {"pred": rng.standard_normal(shape)})
        else:
            point = {
                "pred_occludee": rng.uniform(0.02, 0.98, shape),
                "gt_occludee": (rng.random(shape) < 0.5).astype(float),
                "pred_occluder": rng.uniform(0.02, 0.98, shape),
                "gt_occluder": (rng.random(shape) < 0.5).astype(float) if k % 4 else None,
            }
            direction = {"pred_occludee": rng.standard_normal(shape), "pred_occluder": rng.standard_normal(shape)}
            err = grad_check("seg", point, direction, cfg=LossConfig(lam=float(rng.uniform(0, 2))))
        worst = max(worst, err)
    assert worst <= 1e-6


def test_grad_check_zero_direction():
    point = {"pred": np.full((2, 2), 0.4), "target": np.ones((2, 2))}
    assert grad_check("bce", point, {"pred": np.zeros((2, 2))}) == 0.0


def test_grad_check_rejects_clamp_boundary():
    point = {"pred": np.array([0.5, 1.0]), "target": np.ones(2)}
    with pytest.raises(ValueError):
        grad_check("bce", point, {"pred": np.ones(2)})
    with pytest.raises(ValueError):
        grad_check("dice", point, {"pred": np.ones(2)})


def test_run_loss_cases():
    cases = [
        {"pred": [[0.9, 0.1], [0.8, 0.2]], "target": [[1, 0], [1, 0]]},
        {"pred": [[0.5]], "target": [[1]], "pred_occluder": [[0.5]], "target_occluder": None, "lambda": 0.5},
        {"pred": [[1.0]], "target": [[1]]},
    ]
    rows = run_loss_cases(cases, seed=0)
    assert abs(rows[0]["bce"] - 0.164252) <= 1e-6
    assert rows[1]["seg"] == pytest.approx(math.log(2) * 1.5, abs=1e-12)
    assert rows[0]["grad_check"] <= 1e-6 and rows[1]["grad_check"] <= 1e-6
    assert rows[2]["grad_check"] is None and "clamp" in rows[2]["grad_check_skipped"]
    assert run_loss_cases(cases, seed=0) == rows
