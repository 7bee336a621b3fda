import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ptadapt.gradcheck import check_losses, numeric_grad, relative_error
from ptadapt.losses import combine, dice_loss, focal_loss, soft_iou_loss, total_loss

LOSSES = (focal_loss, dice_loss, soft_iou_loss)


def test_focal_single_pixel():
    expected = -0.25 * 0.5**2 * math.log(0.5)
    assert focal_loss(np.zeros((1, 1)), np.ones((1, 1)))["value"] == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.043322, abs=1e-6)


def test_dice_empty_target_half_probability():
    assert dice_loss(np.zeros((2, 2)), np.zeros((2, 2)))["value"] == pytest.approx(2 / 3, rel=1e-12)


def test_soft_iou_empty_target_half_probability():
    assert soft_iou_loss(np.zeros((2, 2)), np.zeros((2, 2)))["value"] == pytest.approx(2 / 3, rel=1e-12)


def test_total_weighted_sum():
    assert combine(0.01, 0.2, 0.5, 0.3) == pytest.approx(0.75, abs=1e-15)
    assert combine(0.0, 0.0, 0.0, 0.0) == 0.0


@pytest.mark.parametrize("fn", LOSSES)
def test_saturated_perfect_prediction(fn):
    t = np.array([[1, 0, 1], [0, 0, 1]], dtype=bool)
    logits = np.where(t, 30.0, -30.0)
    assert fn(logits, t)["value"] < 1e-10


@pytest.mark.parametrize("fn", LOSSES)
def test_shape_mismatch(fn):
    with pytest.raises(ValueError):
        fn(np.zeros((2, 2)), np.zeros((2, 3)))


def test_total_loss_misalignment():
    with pytest.raises(ValueError):
        total_loss([np.zeros((2, 2))] * 2, [np.zeros((2, 2))], 0.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-8, 8)), arrays(bool, (3, 4)))
def test_losses_nonnegative(logits, target):
    for fn in LOSSES:
        assert fn(logits, target)["value"] >= 0.0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-6, 6)), arrays(bool, (3, 3)))
def test_loss_gradients_finite_differences(logits, target):
    for fn in LOSSES:
        num = numeric_grad(lambda x: fn(x, target)["value"], logits)
        assert relative_error(fn(logits, target)["grad"], num) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_gradcheck_loss_suite(seed):
    for r in check_losses(seed):
        assert r.passed, r


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1 << 30), st.floats(0, 5))
def test_pbr_off_equals_zero_lambda_match(seed, match):
    rng = np.random.default_rng(seed)
    logits = list(rng.normal(size=(3, 4, 4)))
    labels = [rng.random((4, 4)) < 0.5 for _ in range(3)]
    off = total_loss(logits, labels, match, use_match=False)
    zero = total_loss(logits, labels, match, lambda_match=0.0)
    assert off["value"] == zero["value"]
    assert off["match"] == 0.0
    for a, b in zip(off["logit_grads"], zero["logit_grads"]):
        assert a.tobytes() == b.tobytes()


def test_total_is_instance_average():
    rng = np.random.default_rng(0)
    logits = list(rng.normal(size=(2, 3, 3)))
    labels = [rng.random((3, 3)) < 0.5 for _ in range(2)]
    r = total_loss(logits, labels, 0.4)
    focal = np.mean([focal_loss(x, t)["value"] for x, t in zip(logits, labels)])
    dice = np.mean([dice_loss(x, t)["value"] for x, t in zip(logits, labels)])
    iou = np.mean([soft_iou_loss(x, t)["value"] for x, t in zip(logits, labels)])
    assert r["value"] == pytest.approx(20 * focal + dice + 0.1 * 0.4 + iou, rel=1e-12)
