from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from polypnet.errors import ContractError
from polypnet.metrics import (
    METRIC_NAMES,
    ConfusionCounts,
    MetricRow,
    aggregate_counts,
    aggregate_dataset,
    compute_metrics,
    confusion_counts,
    read_report,
    write_report,
)

from oracles import dsc_from_iou_exact, metrics_from_sets


def fuzz_pairs(n, seed=0, side=8):
    """Random mask pairs whose densities include the empty extremes."""
    rng = np.random.default_rng(seed)
    for i in range(n):
        dp, dg = rng.choice([0.0, 0.05, 0.3, 0.5, 0.9, 1.0], size=2)
        pred = rng.random((1, 1, side, side)) * (rng.random((1, 1, side, side)) < dp)
        gt = (rng.random((1, 1, side, side)) < dg).astype(np.uint8)
        if i % 50 == 0:
            pred, gt = np.zeros_like(pred), np.zeros_like(gt)
        yield pred, gt


def test_counts_examples():
    ones = np.ones((1, 1, 2, 2))
    assert confusion_counts(ones, ones.astype(int)) == ConfusionCounts(4, 0, 0, 0)
    pred = np.array([[1.0, 1.0], [0.0, 0.0]]).reshape(1, 1, 2, 2)
    gt = np.array([[1, 0], [1, 0]]).reshape(1, 1, 2, 2)
    assert confusion_counts(pred, gt) == ConfusionCounts(1, 1, 1, 1)
    c = confusion_counts(1.0 - gt, gt)
    assert c.tp == 0 and c.tn == 0


def test_threshold_is_inclusive():
    pred = np.array([0.5, 0.4999]).reshape(1, 1, 1, 2)
    assert confusion_counts(pred, np.array([1, 1]).reshape(1, 1, 1, 2)) == ConfusionCounts(1, 0, 1, 0)


def test_counts_errors():
    with pytest.raises(ContractError):
        confusion_counts(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))
    with pytest.raises(ContractError):
        confusion_counts(np.zeros((1, 1, 2, 2)), np.full((1, 1, 2, 2), 2))
    with pytest.raises(ContractError):
        confusion_counts(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)), threshold=1.0)
    with pytest.raises(ContractError):
        ConfusionCounts(-1, 0, 0, 0)


def test_hand_case_all_ones():
    m = compute_metrics(ConfusionCounts(1, 1, 1, 1))
    assert m.miou == pytest.approx(1 / 3, abs=1e-15)
    assert (m.dsc, m.recall, m.precision, m.accuracy, m.f2) == (0.5, 0.5, 0.5, 0.5, 0.5)


def test_perfect_and_empty():
    assert compute_metrics(ConfusionCounts(7, 0, 0, 9)).values() == (1.0,) * 6
    assert compute_metrics(ConfusionCounts(0, 0, 0, 64)).values() == (1.0,) * 6


def test_one_side_empty_scores_zero():
    m = compute_metrics(ConfusionCounts(0, 3, 0, 5))
    assert (m.miou, m.dsc, m.recall, m.precision, m.f2) == (0.0,) * 5
    m = compute_metrics(ConfusionCounts(0, 0, 3, 5))
    assert (m.miou, m.dsc, m.recall, m.precision, m.f2) == (0.0,) * 5


def test_f2_hand_case():
    m = compute_metrics(ConfusionCounts(5, 5, 0, 0))
    assert (m.precision, m.recall) == (0.5, 1.0)
    assert m.f2 == pytest.approx(25 / 30, abs=1e-15)


def test_fuzz_against_pixel_sets():
    seen_empty = 0
    for pred, gt in fuzz_pairs(1000):
        want, counts = metrics_from_sets(pred, gt)
        c = confusion_counts(pred, gt)
        assert (c.tp, c.fp, c.fn, c.tn) == counts
        got = compute_metrics(c)
        assert got.values() == tuple(want[k] for k in METRIC_NAMES)
        seen_empty += counts[:3] == (0, 0, 0)
    assert seen_empty >= 20


@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_metric_identities(tp, fp, fn, tn):
    if tp + fp + fn + tn == 0:
        return
    m = compute_metrics(ConfusionCounts(tp, fp, fn, tn))
    assert all(0.0 <= v <= 1.0 for v in m.values())
    assert m.miou <= m.dsc <= 1.0
    assert m.dsc == pytest.approx(2 * m.miou / (1 + m.miou), abs=1e-12)
    if tp + fp + fn:
        exact_from_iou, exact_dsc = dsc_from_iou_exact(tp, fp, fn)
        assert exact_from_iou == exact_dsc
        assert m.dsc == float(exact_dsc)
    if m.precision and m.recall:
        p, r = m.precision, m.recall
        assert abs(m.f2 - 5 * p * r / (4 * p + r)) <= 1e-9
    swapped = compute_metrics(ConfusionCounts(tp, fn, fp, tn))
    assert swapped.dsc == m.dsc
    complement = compute_metrics(ConfusionCounts(tn, fn, fp, tp))
    assert complement.accuracy == m.accuracy


def test_dsc_iou_exact_oracle_is_exact():
    assert dsc_from_iou_exact(1, 1, 1) == (Fraction(1, 2), Fraction(1, 2))


def test_aggregate_dataset():
    r = MetricRow(0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
    assert aggregate_dataset([r]).values() == r.values()
    zero, one = MetricRow(*(0.0,) * 6), MetricRow(*(1.0,) * 6)
    assert aggregate_dataset([zero, one]).values() == (0.5,) * 6
    rows = [MetricRow(*np.random.default_rng(i).random(6)) for i in range(3)]
    for k, name in enumerate(METRIC_NAMES):
        hand = (getattr(rows[0], name) + getattr(rows[1], name) + getattr(rows[2], name)) / 3
        assert aggregate_dataset(rows).values()[k] == pytest.approx(hand, abs=1e-15)
    with pytest.raises(ContractError):
        aggregate_dataset([])


def test_micro_pools_pixels():
    a, b = ConfusionCounts(1, 0, 0, 3), ConfusionCounts(0, 1, 1, 2)
    assert aggregate_counts([a, b]) == compute_metrics(ConfusionCounts(1, 1, 1, 5))
    # macro and micro disagree on this pair
    assert aggregate_dataset([compute_metrics(a), compute_metrics(b)]).miou == 0.5
    assert aggregate_counts([a, b]).miou == pytest.approx(1 / 3)


def test_report_file(tmp_path):
    rows = [MetricRow(1 / 3, 0.5, 0.5, 0.5, 0.5, 0.5), MetricRow(1.0, 1.0, 1.0, 1.0, 1.0, 1.0)]
    path = tmp_path / "r.csv"
    write_report(path, ["a.ppm", "b.ppm"], rows, micro=rows[0])
    lines = path.read_text().splitlines()
    assert lines[0] == "image,miou,dsc,recall,precision,accuracy,f2"
    assert lines[1] == "a.ppm,0.3333,0.5000,0.5000,0.5000,0.5000,0.5000"
    assert lines[3] == "MEAN,0.6667,0.7500,0.7500,0.7500,0.7500,0.7500"
    assert lines[4].startswith("MICRO,")
    assert read_report(path)["MEAN"]["dsc"] == 0.75
    with pytest.raises(ContractError):
        write_report(path, ["a"], rows)
