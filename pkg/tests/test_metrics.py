from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import brute_confusion, brute_metrics
from focusnet.exceptions import ShapeError, ValidationError
from focusnet.metrics import (
    PUBLISHED_ROWS,
    ConfusionCounts,
    binarize,
    confusion,
    evaluate,
    format_table,
    format_value,
    metrics_from_confusion,
    report_csv,
    report_from_masks,
)


def test_binarize_rules():
    assert binarize(np.array([0.5]), 0.5).tolist() == [0]
    assert binarize(np.full((2, 2), 0.9)).tolist() == [[1, 1], [1, 1]]
    with pytest.raises(ValidationError):
        binarize(np.zeros(2), 1.0)


@given(st.integers(0, 2**31), st.floats(0.01, 0.98), st.floats(0.001, 0.5))
def test_binarize_monotone(seed, t, dt):
    prob = np.random.default_rng(seed).random((8, 8))
    hi = min(t + dt, 0.99)
    assert binarize(prob, hi).sum() <= binarize(prob, t).sum()


def test_confusion_examples():
    assert confusion(np.array([1, 1, 0, 0]), np.array([1, 0, 1, 0])) == ConfusionCounts(1, 1, 1, 1)
    m = np.array([[1, 0], [1, 1]])
    c = confusion(m, m)
    assert c.FP == c.FN == 0
    c = confusion(1 - m, m)
    assert c.TP == c.TN == 0
    with pytest.raises(ShapeError):
        confusion(np.zeros(3), np.zeros(4))
    with pytest.raises(ValidationError):
        confusion(np.array([2, 0]), np.array([1, 0]))


def test_metrics_examples():
    r = metrics_from_confusion(ConfusionCounts(1, 1, 1, 1))
    assert (r.SE, r.SP, r.AC, r.DI) == (0.5, 0.5, 0.5, 0.5)
    assert r.JI == 1 / 3
    perfect = metrics_from_confusion(ConfusionCounts(5, 0, 3, 0))
    assert all(v == 1.0 for v in perfect.values().values()) and not perfect.degenerate
    negative = metrics_from_confusion(ConfusionCounts(0, 0, 4, 0))
    assert "SE" in negative.degenerate and negative.SE == 1.0
    assert negative.SP == negative.AC == 1.0
    with pytest.raises(ValidationError):
        metrics_from_confusion(ConfusionCounts(0, 0, 0, 0))


def test_brute_force_oracle_on_random_masks():
    r = np.random.default_rng(11)
    for _ in range(200):
        density = r.random()
        pred = (r.random((16, 16)) < density).astype(np.uint8)
        gt = (r.random((16, 16)) < r.random()).astype(np.uint8)
        tp, fp, tn, fn = brute_confusion(pred, gt)
        c = confusion(pred, gt)
        assert (c.TP, c.FP, c.TN, c.FN) == (tp, fp, tn, fn)
        assert metrics_from_confusion(c).values() == brute_metrics(tp, fp, tn, fn)


@given(st.integers(0, 300), st.integers(0, 300), st.integers(0, 300), st.integers(0, 300))
def test_dice_jaccard_identity(tp, fp, tn, fn):
    if tp + fp + tn + fn == 0:
        return
    r = metrics_from_confusion(ConfusionCounts(tp, fp, tn, fn))
    assert all(0.0 <= v <= 1.0 for v in r.values().values())
    assert abs(r.DI - 2 * r.JI / (1 + r.JI)) <= 1e-12
    if tp + fp + fn:
        ji = Fraction(tp, tp + fp + fn)
        assert Fraction(2 * tp, 2 * tp + fp + fn) == 2 * ji / (1 + ji)


@given(st.integers(0, 2**31))
def test_accuracy_symmetry(seed):
    r = np.random.default_rng(seed)
    a, b = (r.random((6, 6)) > 0.5).astype(int), (r.random((6, 6)) > 0.5).astype(int)
    assert metrics_from_confusion(confusion(a, b)).AC == metrics_from_confusion(confusion(b, a)).AC


def test_report_aggregation():
    r = np.random.default_rng(2)
    preds = [(r.random((1, 5, 5)) > 0.5).astype(np.uint8) for _ in range(4)]
    gts = [(r.random((1, 5, 5)) > 0.5).astype(np.uint8) for _ in range(4)]
    rep = report_from_masks(preds, gts)
    summed = ConfusionCounts(0, 0, 0, 0)
    for entry in rep.per_image:
        summed = summed + entry.counts
    assert rep.counts == summed
    assert rep.macro["DI"] == pytest.approx(np.mean([e.DI for e in rep.per_image]))


def test_evaluate_identity_stub():
    r = np.random.default_rng(3)
    masks = (r.random((3, 1, 8, 8)) > 0.5).astype(np.float32)
    # the "model" returns its input, and the input is the ground truth
    rep = evaluate(None, (masks.copy(), masks), predict_fn=lambda x: x)
    assert all(v == 1.0 for v in rep.values().values())


def test_format_value_half_up():
    assert format_value(0.5) == "0.5000"
    assert format_value(0.12345) == "0.1235"
    assert format_value(0.99995) == "1.0000"
    assert format_value(1 / 3) == "0.3333"


def test_format_table_published_rows():
    for key, expected in (("skin", ["0.7673", "0.9896", "0.9214", "0.7562", "0.8315"]),
                          ("lung", ["0.9757", "0.9981", "0.9932", "0.9965"])):
        text = format_table([PUBLISHED_ROWS[key]])
        header, rule, row = text.splitlines()
        cells = [c.strip() for c in row.split("|")]
        assert cells == ["FocusNet (ours)", *expected]
        assert [c.strip() for c in header.split("|")] == ["Method", "SE", "SP", "AC", "JI", "DI"][:len(cells)]
        assert set(rule) == {"-"} and len(rule) == len(header) == len(row)


def test_format_table_rejects_missing_column():
    with pytest.raises(ValidationError):
        format_table([("a", {"SE": 1.0})], ["SE", "SP"])


def test_report_csv():
    rep = metrics_from_confusion(ConfusionCounts(0, 0, 4, 0))
    lines = report_csv([("val", rep)]).splitlines()
    assert lines[0] == "name,SE,SP,AC,JI,DI,flags"
    assert lines[1].startswith("val,1.0,1.0,1.0,1.0,1.0,")
    assert "SE" in lines[1].split(",")[-1]
