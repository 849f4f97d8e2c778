import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import retention_bruteforce
from sint.boxes import iou
from sint.siamese import extract_features
from sint.tracker import (BoxRegressors, SamplerConfig, SINTTracker, TrackerConfig, WindowConfig, apply_targets,
                          box_targets, candidate_count, fit_regressors, flow_filter, flow_retention,
                          presence_accuracy, read_result_log, refine_box, reid_scan, ridge_fit,
                          sample_candidates, select_best, sliding_windows, track_frame, write_result_log)


def test_default_candidate_count():
    cands = sample_candidates((32, 32, 10, 10), (64, 64), SamplerConfig(), clip=False)
    assert len(cands) == candidate_count(SamplerConfig()) == 303


@given(st.integers(1, 12), st.integers(1, 12), st.lists(st.floats(0.3, 2.0), min_size=1, max_size=4))
def test_candidate_count_formula(r, a, scales):
    cfg = SamplerConfig(radial_divisions=r, angular_divisions=a, scales=scales)
    cands = sample_candidates((50, 50, 10, 12), (100, 100), cfg, clip=False)
    assert len(cands) == r * a * len(scales) + len(scales)


def test_center_candidate_first_and_radii():
    cfg = SamplerConfig(radial_divisions=4, angular_divisions=8, scales=(1.0,))
    cands = sample_candidates((30, 30, 10, 6), (64, 64), cfg, radius=8.0, clip=False)
    np.testing.assert_allclose(cands[0], (30, 30, 10, 6))
    dist = np.hypot(cands[1:, 0] - 30, cands[1:, 1] - 30)
    np.testing.assert_allclose(sorted(set(np.round(dist, 9))), [2, 4, 6, 8])


def test_default_radius_is_longer_side():
    assert SamplerConfig().search_radius((0, 0, 12, 20), 640) == 20
    assert SamplerConfig(adaptive=True).search_radius((0, 0, 12, 20), 512) == 30
    assert SamplerConfig(adaptive=True).search_radius((0, 0, 12, 20), 64) == pytest.approx(3.75)


def test_clipping_drops_thin_boxes():
    cands = sample_candidates((1, 1, 6, 6), (64, 64))
    assert np.all(cands[:, 2] >= 4) and np.all(cands[:, 3] >= 4)
    assert np.all(cands[:, 0] - cands[:, 2] / 2 >= 0)


def test_retention_examples():
    flow = np.zeros((64, 64, 2))
    prev = np.array([30.0, 30.0, 20.0, 20.0])
    assert flow_retention(prev, flow, prev[None])[0] == 1.0
    flow[..., 0] = 10.0
    shifted = prev + [10, 0, 0, 0]
    np.testing.assert_array_equal(flow_retention(prev, flow, np.stack([shifted, prev])), [1.0, 0.5])
    kept = flow_filter(prev, flow, np.stack([shifted, prev]), 0.25)
    assert len(kept) == 2


def test_retention_matches_bruteforce(rng):
    flow = rng.normal(0, 3, size=(24, 24, 2))
    prev = np.array([11.3, 12.7, 9.4, 7.1])
    cands = np.column_stack([rng.uniform(4, 20, size=(6, 2)), rng.uniform(4, 14, size=(6, 2))])
    got = flow_retention(prev, flow, cands)
    want = [retention_bruteforce(prev, flow, c) for c in cands]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_flow_filter_thresholds(rng):
    flow = rng.normal(0, 2, size=(40, 40, 2))
    prev = np.array([20.0, 20.0, 10.0, 10.0])
    cands = sample_candidates(prev, (40, 40))
    assert len(flow_filter(prev, flow, cands, 0.0)) == len(cands)
    assert len(flow_filter(prev, flow, cands, 1.01)) == 0


def test_select_best_ties():
    cands = np.array([[10, 10, 4, 4], [12, 10, 4, 4], [11, 10, 4, 4]], dtype=float)
    assert select_best([1.0, 2.0, 2.0], cands, np.array([10.0, 10, 4, 4])) == 2
    assert select_best([2.0, 2.0, 1.0], cands, np.array([11.0, 10, 4, 4])) == 0


def test_targets_round_trip(rng):
    p = np.column_stack([rng.uniform(10, 50, size=(5, 2)), rng.uniform(5, 20, size=(5, 2))])
    g = np.column_stack([rng.uniform(10, 50, size=(5, 2)), rng.uniform(5, 20, size=(5, 2))])
    np.testing.assert_allclose(apply_targets(p, box_targets(p, g)), g)


def test_ridge_fit_recovers_linear_map(rng):
    x = rng.normal(size=(200, 6))
    w = rng.normal(size=(6, 4))
    t = x @ w + 0.3
    w_hat, b_hat = ridge_fit(x, t, 1e-8)
    np.testing.assert_allclose(w_hat, w, atol=1e-6)
    np.testing.assert_allclose(b_hat, 0.3, atol=1e-6)
    with pytest.raises(ValueError):
        ridge_fit(x, t, 0.0)


def test_zero_offset_regressors_are_identity(model, sequence):
    box = sequence.groundtruth[0]
    feats = extract_features(model, sequence.frames[0], np.repeat(box[None], 8, axis=0)).values
    w, b = ridge_fit(feats, np.zeros((8, 4)), 1.0)
    regs = BoxRegressors(w, b, 1.0)
    out, ok = refine_box(box, feats[0], regs)
    assert ok
    np.testing.assert_allclose(out, box, atol=1e-12)


def test_fit_regressors_rejects_zero_lambda(model, sequence):
    with pytest.raises(ValueError):
        fit_regressors(sequence.frames[0], sequence.groundtruth[0], model, ridge_lambda=0.0)


def test_tracking_frame_zero_on_itself(model, sequence):
    cfg = TrackerConfig(refine=False)
    tracker = SINTTracker(model, cfg)
    tracker.init(sequence.frames[0], sequence.groundtruth[0])
    res = tracker.update(sequence.frames[0])
    assert iou(res.refined, sequence.groundtruth[0]) >= 0.99
    assert res.score == pytest.approx(model.n_blocks, abs=1e-9)


def test_tracking_does_not_touch_model(model, sequence):
    before = [p.value.copy() for p in model.params()]
    SINTTracker(model).track(sequence.frames[:4], sequence.groundtruth[0])
    for p, v in zip(model.params(), before):
        np.testing.assert_array_equal(p.value, v)


def test_sint_plus_does_not_mutate_shared_config(model):
    cfg = TrackerConfig(sint_plus=True)
    tracker = SINTTracker(model, cfg)
    assert tracker.config.sampler.adaptive and not cfg.sampler.adaptive


def test_track_result_shapes_and_determinism(model, sequence):
    a = SINTTracker(model).track(sequence.frames[:5], sequence.groundtruth[0])
    b = SINTTracker(model).track(sequence.frames[:5], sequence.groundtruth[0])
    assert a.boxes.shape == (5, 4)
    np.testing.assert_array_equal(a.boxes, b.boxes)
    np.testing.assert_array_equal(a.boxes[0], sequence.groundtruth[0])


def test_empty_candidates_fall_back(model, sequence):
    cfg = TrackerConfig(refine=False)
    q = extract_features(model, sequence.frames[0], sequence.groundtruth[:1])[0]
    res = track_frame(model, q, sequence.frames[1], np.array([-40.0, -40.0, 10, 10]), cfg, 5.0)
    assert res.lost


def test_flow_filter_removing_everything_keeps_candidates(model, sequence):
    cfg = TrackerConfig(refine=False, flow_threshold=2.0)
    q = extract_features(model, sequence.frames[0], sequence.groundtruth[:1])[0]
    flow = np.zeros(sequence.frames[0].shape[:2] + (2,))
    res = track_frame(model, q, sequence.frames[1], sequence.groundtruth[0], cfg, 10.0, flow=flow)
    assert res.n_flow_kept == res.n_candidates


def test_result_log_round_trip(tmp_path, model, sequence):
    result = SINTTracker(model).track(sequence.frames[:3], sequence.groundtruth[0])
    write_result_log(tmp_path / "log.txt", result)
    lines = (tmp_path / "log.txt").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("0,") and lines[0].count(",") == 5
    idx, boxes, scores = read_result_log(tmp_path / "log.txt")
    np.testing.assert_array_equal(idx, [0, 1, 2])
    np.testing.assert_allclose(boxes, result.boxes, atol=1e-5)


def test_sliding_windows_cover_frame():
    wins = sliding_windows((64, 64), np.array([0, 0, 16, 16.0]), WindowConfig(scales=(1.0,)))
    assert len(wins) == 13 * 13
    assert wins[:, 0].min() == 8 and wins[:, 0].max() == 56
    full = sliding_windows((10, 10), np.array([0, 0, 40, 40.0]))
    np.testing.assert_array_equal(full, [[5, 5, 10, 10]])


def test_reid_self_match_on_grid(model, sequence):
    frame = sequence.frames[0]
    box = np.array([28.0, 32.0, 16.0, 16.0])
    q = extract_features(model, frame, box[None])[0]
    best, score = reid_scan(model, q, frame, box)
    assert score == pytest.approx(model.n_blocks, abs=1e-6)
    again = reid_scan(model, q, frame, box)
    np.testing.assert_array_equal(best, again[0])


def test_presence_accuracy():
    acc, thr = presence_accuracy([0.1, 0.2, 0.9, 0.8], [0, 0, 1, 1])
    assert acc == 1.0 and 0.2 < thr < 0.8
    acc, _ = presence_accuracy([0.5, 0.5], [0, 1])
    assert acc == 0.5
