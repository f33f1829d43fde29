import json
import math

import numpy as np
import pytest

from evtrack.errors import ConfigError
from evtrack.event_core import load_events, load_labels
from evtrack.synth import (
    SceneState,
    TrajectoryConfig,
    fixture_configs,
    gen_trajectory,
    render_events,
    simulate,
    write_fixture,
    write_session,
)

SMALL = dict(width=64, height=48, radius=8.0)


def full_disc(cx, cy, r, w, h):
    yy, xx = np.mgrid[0:h, 0:w]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def test_fixation_without_jitter_is_constant():
    s = gen_trajectory(TrajectoryConfig(kind="fixation", jitter_rms=0.0, center=(300.0, 200.0)))
    assert np.all(s.cx == 300.0) and np.all(s.cy == 200.0) and s.eye_open.all()


def test_pursuit_quarter_period_reaches_amplitude():
    A = 100.0
    cfg = TrajectoryConfig(kind="smooth_pursuit", center=(320.0, 240.0), amplitude=A, pursuit_speed=2 * math.pi * A)
    s = gen_trajectory(cfg)  # 1 Hz, so phase pi/2 at 250 ms
    assert s.cx[250] - 320.0 == pytest.approx(A, abs=1e-9)
    assert s.cx[0] == pytest.approx(320.0)


def test_saccade_mix_deterministic():
    a = simulate(TrajectoryConfig(kind="saccade_mix", seed=7, duration=1.0))
    b = simulate(TrajectoryConfig(kind="saccade_mix", seed=7, duration=1.0))
    for f in ("t", "x", "y", "p"):
        np.testing.assert_array_equal(getattr(a[0], f), getattr(b[0], f))
    np.testing.assert_array_equal(a[1].x, b[1].x)
    c = simulate(TrajectoryConfig(kind="saccade_mix", seed=8, duration=1.0))
    assert not np.array_equal(a[1].x, c[1].x)


def test_static_scene_only_fires_at_onset():
    cfg = TrajectoryConfig(kind="fixation", jitter_rms=0.0, duration=0.5, center=(30.0, 20.0), **SMALL)
    ev, _ = simulate(cfg)
    assert ev.t.max() < 1000
    assert len(ev.t) == full_disc(30.0, 20.0, 8.0, 64, 48).sum()
    assert np.all(ev.p == -1)


def test_one_pixel_per_tick_matches_symmetric_difference():
    cfg = TrajectoryConfig(duration=0.02, **SMALL)
    n = 20
    cx = 20.0 + np.arange(n)
    cy = np.full(n, 24.3)
    ev, _ = render_events(SceneState(cx, cy, np.ones(n, bool)), cfg)
    tick = ev.t // 1000
    prev = np.zeros((48, 64), bool)
    for k in range(n):
        now = full_disc(cx[k], cy[k], 8.0, 64, 48)
        sel = tick == k
        assert sel.sum() == (prev ^ now).sum()
        got = set(zip(ev.x[sel], ev.y[sel], ev.p[sel]))
        ys, xs = np.nonzero(prev ^ now)
        want = {(x, y, -1 if now[y, x] else 1) for x, y in zip(xs, ys)}
        assert got == want
        prev = now


def test_label_count_and_centers():
    cfg = TrajectoryConfig(kind="saccade_mix", seed=3, duration=2.0)
    scene = gen_trajectory(cfg)
    ev, lab = render_events(scene, cfg)
    assert len(lab.t) == 200
    np.testing.assert_array_equal(lab.t, np.arange(200) * 10_000)
    np.testing.assert_array_equal(lab.x, scene.cx[::10])
    np.testing.assert_array_equal(lab.y, scene.cy[::10])
    assert ev.x.min() >= 0 and ev.x.max() < 640 and ev.y.min() >= 0 and ev.y.max() < 480
    assert np.all(np.diff(ev.t) >= 0)


def test_blinks_are_silent_and_flagged():
    cfg = TrajectoryConfig(kind="blink_cycle", seed=2, duration=3.0)
    scene = gen_trajectory(cfg)
    ev, lab = render_events(scene, cfg)
    assert (~scene.eye_open).any()
    closed_ticks = np.flatnonzero(~scene.eye_open)
    assert not np.isin(ev.t // 1000, closed_ticks).any()
    np.testing.assert_array_equal(lab.close, (~scene.eye_open[::10]).astype(int))


def test_noise_events_stay_in_bounds():
    ev, _ = simulate(TrajectoryConfig(kind="fixation", duration=0.5, noise_rate=2000.0, **SMALL))
    assert ev.x.max() < 64 and ev.y.max() < 48 and ev.x.min() >= 0


def test_jitter_rms_bounded():
    cfg = TrajectoryConfig(kind="fixation", center=(320.0, 240.0), duration=2.0, seed=5)
    s = gen_trajectory(cfg)
    assert np.sqrt(np.mean((s.cx - 320) ** 2)) <= 0.5 + 1e-12
    assert np.sqrt(np.mean((s.cy - 240) ** 2)) <= 0.5 + 1e-12


def test_saccades_last_at_most_twenty_ms():
    for seed in range(5):
        s = gen_trajectory(TrajectoryConfig(kind="saccade_mix", seed=seed, duration=3.0, jitter_rms=0.0))
        moving = np.concatenate([[False], (np.diff(s.cx) != 0) | (np.diff(s.cy) != 0), [False]])
        edges = np.flatnonzero(np.diff(moving.astype(int)))
        runs = edges[1::2] - edges[::2]
        assert runs.size > 0 and runs.max() <= 20
        speed = np.hypot(np.diff(s.cx), np.diff(s.cy))  # px per ms
        assert speed.max() <= 300 * 20 / 1000 + 1e-9


@pytest.mark.parametrize(
    "kw",
    [
        dict(kind="fixation", center=(5.0, 240.0)),
        dict(kind="smooth_pursuit", amplitude=400.0),
        dict(kind="wander"),
        dict(jitter_rms=0.8),
        dict(radius=300.0),
        dict(blink_ms=(50, 100)),
    ],
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        gen_trajectory(TrajectoryConfig(**kw))


def test_write_session_is_byte_deterministic(tmp_path):
    cfg = TrajectoryConfig(kind="smooth_pursuit", seed=4, duration=0.5)
    a = write_session(cfg, tmp_path / "a", "s")
    b = write_session(cfg, tmp_path / "b", "s")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    ev = load_events(a[0])
    lab = load_labels(a[1], 100.0)
    assert len(lab.t) == 50 and ev.width == 640


def test_fixture_manifest(tmp_path):
    cfgs = fixture_configs()
    assert len(cfgs) == 13
    assert {c.kind for c in cfgs} == {"fixation", "smooth_pursuit", "saccade_mix", "blink_cycle"}
    assert sum(c.duration for c in cfgs) == pytest.approx(60.0, abs=0.01)
    short = fixture_configs(n_sessions=2, total_seconds=0.4)
    manifest = write_fixture(tmp_path, short)
    data = json.loads(manifest.read_text())
    assert data["fixture"] == "synthetic-13"
    assert [s["config"]["seed"] for s in data["sessions"]] == [13000, 13001]
    assert (tmp_path / f"{data['sessions'][0]['name']}.evt").exists()
