import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splitfedcl import metrics, nn
from splitfedcl.errors import ShapeError


def test_hand_two_by_two():
    pred = np.array([[0, 1], [1, 2]])
    label = np.array([[0, 1], [2, 2]])
    m = metrics.score(pred, label, 3)
    # class 0: tp1; class 1: tp1 fp1; class 2: tp1 fn1
    assert m.per_class_iou == (1.0, 0.5, 0.5)
    assert m.mean_iou == pytest.approx(2 / 3, abs=1e-12)
    assert m.accuracy == pytest.approx(0.75, abs=1e-12)
    assert m.dice_loss == pytest.approx(1 - 4 / 6, abs=1e-12)
    assert m.precision == pytest.approx(2 / 3, abs=1e-12)
    assert m.recall == pytest.approx(2 / 3, abs=1e-12)


def test_perfect_prediction():
    label = np.random.default_rng(0).integers(0, 3, (4, 8, 8))
    m = metrics.score(label, label, 3)
    assert m.accuracy == 1.0 and m.dice_loss == 0.0
    assert m.per_class_iou == (1.0, 1.0, 1.0)


def test_complement_on_balanced_binary():
    label = np.tile([0, 1], (4, 4))
    m = metrics.score(1 - label, label, 2)
    assert m.accuracy == 0.0 and m.mean_iou == 0.0 and m.dice_loss == 1.0


def test_absent_class_counts_as_perfect():
    m = metrics.score(np.zeros((3, 3), int), np.zeros((3, 3), int), 3)
    assert m.per_class_iou == (1.0, 1.0, 1.0)
    assert m.dice_loss == 0.0 and m.precision == 1.0 and m.recall == 1.0


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        metrics.score(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 5))
def test_against_per_class_loops(seed, c):
    rng = np.random.default_rng(seed)
    pred, label = rng.integers(0, c, (2, 5, 7)), rng.integers(0, c, (2, 5, 7))
    m = metrics.score(pred, label, c)
    ious = []
    for k in range(c):
        inter = np.sum((pred == k) & (label == k))
        union = np.sum((pred == k) | (label == k))
        ious.append(inter / union if union else 1.0)
    np.testing.assert_allclose(m.per_class_iou, ious, atol=1e-12)
    assert m.mean_iou == pytest.approx(np.mean(m.per_class_iou), abs=1e-9)
    assert m.accuracy == pytest.approx(np.mean(pred == label), abs=1e-12)
    for v in (m.accuracy, m.dice_loss, m.mean_iou, m.precision, m.recall):
        assert 0.0 <= v <= 1.0


def test_evaluate_is_pure_and_batch_independent():
    p = nn.init_params(nn.Architecture(), 3)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 1, 8, 8)).astype(np.float32)
    y = rng.integers(0, 3, (5, 8, 8))
    a = metrics.evaluate(p, x, y, batch_size=2)
    b = metrics.evaluate(p, x, y, batch_size=32)
    assert a == b
    pred = nn.forward_split(p, x)[0].argmax(axis=1)
    assert a == metrics.score(pred, y, 3)


def test_evaluate_needs_data():
    with pytest.raises(ShapeError):
        metrics.evaluate(nn.init_params(nn.Architecture(), 0), np.zeros((0, 1, 4, 4)), np.zeros((0, 4, 4), int))


def test_row_has_per_class_columns():
    row = metrics.score(np.zeros((2, 2), int), np.zeros((2, 2), int), 3).as_row()
    assert list(row) == ["accuracy", "dice_loss", "mean_iou", "precision", "recall", "iou_0", "iou_1", "iou_2"]
