import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ptadapt.masks import (
    HorizontalBox,
    binarize,
    dice_score,
    evaluate,
    iou_matrix,
    mask_iou,
    min_enclosing_box,
)

from .conftest import block


def test_iou_identity_and_disjoint():
    a = block((4, 4), (0, 1), (0, 1))
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, block((4, 4), (2, 3), (2, 3))) == 0.0


def test_iou_shifted_blocks_one_seventh():
    a = block((4, 4), (0, 1), (0, 1))
    b = block((4, 4), (1, 2), (1, 2))
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    assert (inter, union) == (1, 7)
    assert mask_iou(a, b) == pytest.approx(1 / 7, abs=1e-15)


def test_iou_both_empty_is_one():
    z = np.zeros((3, 3), bool)
    assert mask_iou(z, z) == 1.0


def test_iou_shape_mismatch():
    with pytest.raises(ValueError):
        mask_iou(np.zeros((2, 2)), np.zeros((2, 3)))


def test_iou_matrix_examples():
    a = block((4, 4), (0, 1), (0, 1))
    b = block((4, 4), (1, 2), (1, 2))
    c = block((4, 4), (3, 3), (3, 3))
    assert iou_matrix([a]).tolist() == [[0.0]]
    assert iou_matrix([a, a]).tolist() == [[0.0, 1.0], [1.0, 0.0]]
    O = iou_matrix([a, b, c])
    expected = np.zeros((3, 3))
    expected[0, 1] = expected[1, 0] = mask_iou(a, b)
    np.testing.assert_array_equal(O, expected)


def test_dice_examples():
    a = block((4, 4), (0, 1), (0, 1))
    b = block((4, 4), (1, 2), (1, 2))
    assert dice_score(a, a) == 1.0
    assert dice_score(a, block((4, 4), (2, 3), (2, 3))) == 0.0
    assert dice_score(a, b) == 2 * 1 / (4 + 4)


def test_evaluate_examples():
    a = block((4, 4), (0, 1), (0, 1))
    b = block((4, 4), (1, 2), (1, 2))
    far = block((4, 4), (3, 3), (3, 3))
    assert evaluate([a, b], [a, b]) == {"mIoU": 1.0, "F1": 1.0}
    assert evaluate([a, a], [a, far])["mIoU"] == 0.5
    r = evaluate([a, b], [b, b])
    assert r["mIoU"] == pytest.approx((1 / 7 + 1) / 2, abs=1e-15)
    assert r["mIoU"] == pytest.approx(4 / 7, abs=1e-15)
    assert r["F1"] == pytest.approx(0.625, abs=1e-15)


def test_min_enclosing_box_examples():
    m = np.zeros((8, 8), bool)
    m[5, 3] = True
    assert min_enclosing_box(m) == HorizontalBox(3, 5, 3, 5)
    assert min_enclosing_box(np.ones((8, 8), bool)).as_tuple() == (0, 0, 7, 7)
    m = np.zeros((8, 8), bool)
    m[2, 1] = m[6, 4] = True
    assert min_enclosing_box(m).as_tuple() == (1, 2, 4, 6)


def test_min_enclosing_box_empty_raises():
    with pytest.raises(ValueError):
        min_enclosing_box(np.zeros((3, 3), bool))


def test_box_rejects_inverted_corners():
    with pytest.raises(ValueError):
        HorizontalBox(3, 0, 2, 0)


def test_binarize_examples():
    assert binarize(np.full((2, 2), 10.0)).all()
    assert not binarize(np.full((2, 2), 0.7), 0.7).any()
    out = binarize(np.array([[-1.0, 2.0], [0.5, -3.0]]))
    assert out.tolist() == [[False, True], [True, False]]


def test_binarize_rejects_nan():
    with pytest.raises(ValueError):
        binarize(np.array([[np.nan, 0.0]]))


masks = arrays(bool, st.tuples(st.integers(1, 6), st.integers(1, 6)))


@st.composite
def mask_pairs(draw):
    shape = draw(st.tuples(st.integers(1, 6), st.integers(1, 6)))
    return draw(arrays(bool, shape)), draw(arrays(bool, shape))


@given(mask_pairs())
def test_iou_symmetric_bounded_and_below_dice(pair):
    a, b = pair
    v = mask_iou(a, b)
    assert v == mask_iou(b, a)
    assert 0.0 <= v <= 1.0
    assert dice_score(a, b) >= v - 1e-15


@given(st.lists(arrays(bool, (4, 5)), min_size=1, max_size=6))
def test_iou_matrix_symmetric_zero_diagonal(ms):
    O = iou_matrix(ms)
    assert np.all(np.diag(O) == 0.0)
    np.testing.assert_array_equal(O, O.T)
    for i in range(len(ms)):
        for j in range(len(ms)):
            if i != j:
                assert O[i, j] == pytest.approx(mask_iou(ms[i], ms[j]), abs=1e-15)


@given(masks)
def test_box_contains_all_and_is_tight(m):
    if not m.any():
        return
    b = min_enclosing_box(m)
    ys, xs = np.nonzero(m)
    assert xs.min() >= b.x_min and xs.max() <= b.x_max
    assert ys.min() >= b.y_min and ys.max() <= b.y_max
    # shrinking any side lets a set pixel escape
    assert (xs == b.x_min).any() and (xs == b.x_max).any()
    assert (ys == b.y_min).any() and (ys == b.y_max).any()


@settings(max_examples=50)
@given(arrays(float, (5, 5), elements=st.floats(-5, 5)), st.floats(-5, 5), st.floats(0, 3))
def test_binarize_count_non_increasing(logits, t, dt):
    assert binarize(logits, t + dt).sum() <= binarize(logits, t).sum()
