import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evtrack.errors import ContractError
from evtrack.event_core import SampleWindow
from evtrack.metrics import euclidean_distance, evaluate, pixel_accuracy, report_from_pixels, to_pixels
from evtrack.models import ModelConfig, build_model


def brute_accuracy(pred, gt, tol):
    hits = 0
    for (px, py), (gx, gy) in zip(pred, gt):
        if math.hypot(px - gx, py - gy) <= tol:
            hits += 1
    return 100.0 * hits / len(pred)


def test_single_sample_distance_seven():
    acc = pixel_accuracy([[7.0, 0.0]], [[0.0, 0.0]])
    assert acc == {5.0: 0.0, 10.0: 100.0, 15.0: 100.0}


def test_three_four_five():
    assert euclidean_distance([[3.0, 4.0]], [[0.0, 0.0]]) == (5.0, 5.0)
    assert pixel_accuracy([[3.0, 4.0]], [[0.0, 0.0]], (5.0,)) == {5.0: 100.0}


def test_half_within():
    pred = [[0.0, 0.0], [20.0, 0.0]]
    gt = [[1.0, 0.0], [0.0, 0.0]]
    assert pixel_accuracy(pred, gt, (10.0,)) == {10.0: 50.0}
    assert euclidean_distance(pred, gt) == (21.0, 10.5)


def test_empty_and_mismatch_raise():
    with pytest.raises(ContractError):
        pixel_accuracy(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ContractError):
        euclidean_distance(np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(ContractError):
        pixel_accuracy([[0.0, 0.0]], [[0.0, 0.0]], (0.0,))


def test_against_brute_force(rng):
    pred = rng.uniform(0, 80, (1000, 2))
    gt = pred + rng.normal(0, 8, (1000, 2))
    acc = pixel_accuracy(pred, gt)
    for t in (5.0, 10.0, 15.0):
        assert acc[t] == brute_accuracy(pred, gt, t)
    total, mean = euclidean_distance(pred, gt)
    ref = sum(math.hypot(*(p - g)) for p, g in zip(pred, gt))
    assert total == pytest.approx(ref, rel=1e-12)
    assert mean == pytest.approx(ref / 1000, rel=1e-12)


coords = st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=1, max_size=30)


@settings(max_examples=100, deadline=None)
@given(coords, coords, st.floats(0.1, 50), st.floats(0.1, 50))
def test_monotone_in_tolerance(a, b, t1, t2):
    n = min(len(a), len(b))
    pred, gt = np.array(a[:n]), np.array(b[:n])
    lo, hi = sorted((t1, t2))
    acc = pixel_accuracy(pred, gt, (lo, hi))
    assert acc[lo] <= acc[hi]


@settings(max_examples=100, deadline=None)
@given(coords, st.floats(-50, 50), st.floats(-50, 50))
def test_translation_invariant(a, dx, dy):
    pred = np.array(a)
    gt = pred[::-1].copy()
    shift = np.array([dx, dy])
    d0 = euclidean_distance(pred, gt)[0]
    d1 = euclidean_distance(pred + shift, gt + shift)[0]
    assert d1 == pytest.approx(d0, rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(coords, st.floats(0.1, 10))
def test_distance_scales(a, c):
    pred = np.array(a)
    gt = np.roll(pred, 1, axis=0)
    d0 = euclidean_distance(pred, gt)[0]
    assert euclidean_distance(c * pred, c * gt)[0] == pytest.approx(c * d0, rel=1e-9, abs=1e-9)


def test_to_pixels_sensor_is_eight_times():
    norm = np.array([[0.5, 0.25]])
    down = to_pixels(norm, 80, 60, "downsampled", 0.125)
    sensor = to_pixels(norm, 80, 60, "sensor", 0.125)
    np.testing.assert_array_equal(down, [[40.0, 15.0]])
    np.testing.assert_array_equal(sensor, [[320.0, 120.0]])
    with pytest.raises(ValueError):
        to_pixels(norm, 80, 60, "retina", 0.125)


def windows(rng, n=3, steps=5, close=None, frame_duration=50_000):
    out = []
    for _ in range(n):
        c = np.zeros(steps, np.int64) if close is None else close
        out.append(SampleWindow(rng.random((steps, 2, 8, 8)), rng.random((steps, 2)), c, 0, frame_duration))
    return out


def test_evaluate_perfect_predictor(rng):
    ws = windows(rng)
    lookup = {w.frames.tobytes(): w.targets for w in ws}
    rep = evaluate(None, ws, predict=lambda f: lookup[f.tobytes()])
    assert rep.p_acc == {5.0: 100.0, 10.0: 100.0, 15.0: 100.0}
    assert rep.total_euclidean == 0.0
    assert rep.n_samples == 15


def test_evaluate_constant_predictor_brute_force(rng):
    ws = windows(rng, n=4)
    rep = evaluate(None, ws, predict=lambda f: np.full((len(f), 2), 0.5), tolerances=(1.0, 2.0, 3.0))
    pred = np.full((20, 2), 4.0)
    gt = np.concatenate([w.targets for w in ws]) * 8
    for t in (1.0, 2.0, 3.0):
        assert rep.p_acc[t] == brute_accuracy(pred, gt, t)


def test_evaluate_excludes_closed_frames(rng):
    close = np.array([0, 1, 1, 0, 0])
    ws = windows(rng, n=2, close=close)
    assert evaluate(None, ws, predict=lambda f: np.zeros((5, 2))).n_samples == 6
    assert evaluate(None, ws, predict=lambda f: np.zeros((5, 2)), exclude_closed=False).n_samples == 10


def test_evaluate_rejects_other_frame_rates(rng):
    with pytest.raises(ContractError):
        evaluate(None, windows(rng, frame_duration=10_000), predict=lambda f: np.zeros((5, 2)))


def test_evaluate_model_matches_manual_forward(rng):
    cfg = ModelConfig(variant="cnn_gru", height=8, width=8, channels=(2, 3), feature=6, hidden=5)
    model, _ = build_model(cfg)
    ws = windows(rng, n=3)
    rep = evaluate(model, ws)
    pred = np.concatenate([model.forward(w.frames[:, None], "eval").coords.data[:, 0] for w in ws]) * 8
    gt = np.concatenate([w.targets for w in ws]) * 8
    ref = report_from_pixels(pred, gt)
    assert rep.p_acc == ref.p_acc
    assert rep.total_euclidean == pytest.approx(ref.total_euclidean, rel=1e-12)


def test_report_outputs(tmp_path):
    rep = report_from_pixels([[3.0, 4.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]], (3.0, 6.0))
    assert rep.to_csv() == "tolerance,p_acc\n3,50.0\n6,100.0\n"
    csv_path, json_path = rep.write(tmp_path)
    summary = json.loads(json_path.read_text())
    assert summary["p_acc"] == {"3": 50.0, "6": 100.0}
    assert summary["mean_euclidean"] == 2.5
    assert csv_path.read_text() == rep.to_csv()
    assert "mean dist" in rep.table()
