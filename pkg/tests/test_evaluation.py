import csv
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import precision_loop, success_loop
from sint.evaluation import (PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS, attribute_report, oracle_tracker,
                             plot_curves, precision_curve, run_robustness, sre_boxes, success_curve,
                             success_rate, tre_starts, write_attribute_report, write_summary)


def boxes_with_iou(values, w=10.0):
    """Pairs of same-size squares whose IoU is exactly ``v`` via horizontal offset."""
    gt = np.array([[50.0, 50.0, w, w]] * len(values))
    # overlap (w - d) * w, union (w + d) * w  ->  d = w (1 - v) / (1 + v)
    d = np.array([w * (1 - v) / (1 + v) for v in values])
    pred = gt.copy()
    pred[:, 0] += d
    return pred, gt


def test_exact_predictions():
    gt = np.array([[10, 10, 5, 5], [20, 20, 5, 5]], dtype=float)
    s = success_curve(gt, gt)
    assert np.all(s.values[:-1] == 1) and s.values[-1] == 0
    assert s.summary == pytest.approx(20 / 21)
    assert precision_curve(gt, gt).summary == 1.0


def test_disjoint_predictions_score_zero():
    gt = np.array([[10, 10, 5, 5]] * 3, dtype=float)
    s = success_curve(gt + [100, 0, 0, 0], gt)
    assert s.value_at(0.0) == 0.0 and s.summary == 0.0


def test_two_frame_success_example():
    pred, gt = boxes_with_iou([0.6, 0.4])
    assert success_curve(pred, gt).value_at(0.5) == 0.5


def test_precision_boundary_inclusive():
    gt = np.array([[10, 10, 5, 5], [30, 30, 5, 5]], dtype=float)
    pred = gt + [20, 0, 0, 0]
    assert precision_curve(pred, gt).summary == 1.0
    assert precision_curve(pred, gt, thresholds=[19.9]).values[0] == 0.0


def test_two_frame_precision_example():
    gt = np.array([[10, 10, 5, 5], [30, 30, 5, 5]], dtype=float)
    pred = gt + [[5, 0, 0, 0], [0, 25, 0, 0]]
    assert precision_curve(pred, gt).summary == 0.5


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        success_curve(np.zeros((3, 4)) + 1, np.ones((2, 4)))


def test_success_rate():
    pred, gt = boxes_with_iou([0.9, 0.75, 0.6, 0.2])
    assert success_rate(pred, gt, 0.7) == 0.5


frame_boxes = st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100), st.floats(1, 40), st.floats(1, 40)),
                       min_size=1, max_size=15)


@given(frame_boxes, frame_boxes)
def test_curves_monotone_and_match_loops(a, b):
    n = min(len(a), len(b))
    pred, gt = np.array(a[:n]), np.array(b[:n])
    s, p = success_curve(pred, gt), precision_curve(pred, gt)
    assert np.all(np.diff(s.values) <= 0) and np.all(np.diff(p.values) >= 0)
    assert np.all((s.values >= 0) & (s.values <= 1))
    from sint.boxes import center_distance, iou
    np.testing.assert_allclose(s.values, success_loop(np.atleast_1d(iou(pred, gt)), SUCCESS_THRESHOLDS))
    np.testing.assert_allclose(p.values, precision_loop(np.atleast_1d(center_distance(pred, gt)),
                                                        PRECISION_THRESHOLDS))


@given(frame_boxes)
def test_metrics_are_pure(a):
    pred = np.array(a)
    gt = pred[::-1].copy()
    np.testing.assert_array_equal(success_curve(pred, gt).values, success_curve(pred, gt).values)


def make_gt(n):
    t = np.arange(n, dtype=float)
    return np.column_stack([20 + 0.1 * t, 20 + 0.05 * t, np.full(n, 10.0), np.full(n, 8.0)])


def test_ope_has_one_variant():
    gt = make_gt(30)
    run = run_robustness(oracle_tracker(gt), [None] * 30, gt, "ope")
    assert len(run.variants) == 1 and run.variants[0].start == 0


def test_tre_on_200_frames_has_20_variants():
    gt = make_gt(200)
    assert tre_starts(200) == list(range(0, 200, 10))
    run = run_robustness(oracle_tracker(gt), [None] * 200, gt, "tre")
    assert len(run.variants) == 20
    assert run.auc >= 20 / 21 and run.prec20 == 1.0


def test_tre_skips_short_segments():
    gt = make_gt(40)
    run = run_robustness(oracle_tracker(gt), [None] * 40, gt, "tre")
    assert len(run.variants) == 16 and len(run.notes) == 4


def test_sre_perturbations():
    variants = sre_boxes(np.array([50.0, 40.0, 20.0, 10.0]))
    assert len(variants) == 12
    shifts = {name: box for name, box in variants}
    np.testing.assert_allclose(shifts["shift-up-left"], [48, 39, 20, 10])
    np.testing.assert_allclose(shifts["scale-0.8"], [50, 40, 16, 8])
    gt = make_gt(20)
    run = run_robustness(oracle_tracker(gt), [None] * 20, gt, "sre")
    assert len(run.variants) == 12 and run.auc >= 20 / 21


def test_unknown_mode():
    gt = make_gt(10)
    with pytest.raises(ValueError):
        run_robustness(oracle_tracker(gt), [None] * 10, gt, "xyz")


def test_attribute_report_examples():
    assert attribute_report({"a": 0.5, "b": 0.7}, {"a": {"blur"}, "b": {"blur"}}) == {"blur": (0.6, 2)}
    rep = attribute_report({"a": 0.4, "b": 0.8}, {"a": {"blur"}, "b": {"occlusion"}, "c": set()})
    assert rep == {"blur": (0.4, 1), "occlusion": (0.8, 1)}


def test_attribute_report_agrees_with_csv_groupby(tmp_path, rng):
    tags = ["blur", "occlusion", "rotation", "fast-motion"]
    aucs = {f"s{i}": float(rng.uniform()) for i in range(30)}
    attrs = {name: set(rng.choice(tags, size=rng.integers(1, 3), replace=False)) for name in aucs}
    write_summary(tmp_path / "summary.csv", [(n, "ope", a, 1.0) for n, a in aucs.items()])
    groups = defaultdict(list)
    with open(tmp_path / "summary.csv") as fh:
        for row in csv.DictReader(fh):
            for tag in attrs[row["sequence"]]:
                groups[tag].append(float(row["auc"]))
    rep = attribute_report(aucs, attrs)
    for tag, vals in groups.items():
        assert rep[tag][0] == pytest.approx(sum(vals) / len(vals), abs=1e-12)
        assert rep[tag][1] == len(vals)
    write_attribute_report(tmp_path / "attr.csv", rep)
    assert (tmp_path / "attr.csv").read_text().startswith("attribute,mean_auc,count")


def test_curve_csv_and_plot(tmp_path):
    gt = make_gt(10)
    s = success_curve(gt, gt)
    s.to_csv(tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "threshold,value" and len(rows) == 22
    plot_curves(tmp_path / "s.svg", {"oracle": s})
    assert (tmp_path / "s.svg").read_text().lstrip().startswith("<?xml")
