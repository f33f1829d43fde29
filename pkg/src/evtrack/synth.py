"""Deterministic synthetic event camera looking at a dark pupil disc.

The scene is simulated on a 1 ms tick. A pixel belongs to the pupil when its
integer coordinate lies within ``radius`` of the (real-valued) center; every
tick, pixels that changed membership fire one event (entering the dark disc
is an OFF event, -1; leaving it is ON, +1). Closed-eye ticks emit nothing.
Ground-truth labels are sampled from the same center track at 100 Hz.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError
from .event_core import EventStream, LabelTrack, write_events, write_labels

TICK_US = 1000
TICKS_PER_SECOND = 1000
LABEL_RATE_HZ = 100.0
KINDS = ("fixation", "smooth_pursuit", "saccade_mix", "blink_cycle")


@dataclass(frozen=True)
class TrajectoryConfig:
    kind: str = "fixation"
    duration: float = 2.0  # seconds
    width: int = 640
    height: int = 480
    radius: float = 40.0
    seed: int = 0
    center: tuple[float, float] | None = None  # None: seeded placement
    jitter_rms: float = 0.5  # fixational tremor, px RMS per axis
    jitter_tau_ms: float = 20.0
    amplitude: float = 120.0  # smooth pursuit, px (x axis)
    amplitude_y: float = 80.0
    pursuit_speed: float = 400.0  # peak x velocity, px/s
    pursuit_y_ratio: float = 0.5  # y frequency relative to x
    px_per_deg: float = 20.0
    saccade_peak_deg_s: float = 300.0
    fixation_ms: tuple[int, int] = (200, 600)
    blink_period_ms: tuple[int, int] = (800, 1500)
    blink_ms: tuple[int, int] = (100, 300)
    noise_rate: float = 0.0  # uniform background events per second

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown trajectory kind {self.kind!r}; expected one of {KINDS}")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        if self.radius <= 0 or 2 * self.radius >= min(self.width, self.height):
            raise ConfigError("pupil radius does not fit the sensor")
        if not 0 <= self.jitter_rms <= 0.5:
            raise ConfigError("jitter_rms must lie in [0, 0.5] px")
        if not 0 < self.saccade_peak_deg_s <= 300:
            raise ConfigError("saccade peak velocity must lie in (0, 300] deg/s")
        lo, hi = self.blink_ms
        if not 100 <= lo <= hi <= 300:
            raise ConfigError("blink durations must lie within 100-300 ms")

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration * TICKS_PER_SECOND))


@dataclass(eq=False)
class SceneState:
    """Pupil center and eye-open flag at every 1 ms tick."""

    cx: np.ndarray
    cy: np.ndarray
    eye_open: np.ndarray

    def __len__(self) -> int:
        return int(self.cx.size)


def _jitter(rng: np.random.Generator, n: int, rms: float, tau: float) -> np.ndarray:
    if rms == 0 or n == 0:
        return np.zeros((2, n))
    a = math.exp(-1.0 / tau)
    white = rng.normal(size=(2, n))
    out = lfilter([1.0], [1.0, -a], white, axis=1)
    out -= out.mean(axis=1, keepdims=True)
    r = np.sqrt((out**2).mean(axis=1, keepdims=True))
    return out * (rms / np.where(r > 0, r, 1.0))


def _place(rng: np.random.Generator, cfg: TrajectoryConfig, margin_x: float, margin_y: float) -> tuple[float, float]:
    if cfg.center is not None:
        return float(cfg.center[0]), float(cfg.center[1])
    lo_x, hi_x = margin_x, cfg.width - 1 - margin_x
    lo_y, hi_y = margin_y, cfg.height - 1 - margin_y
    if lo_x > hi_x or lo_y > hi_y:
        raise ConfigError("motion amplitude leaves no room inside the sensor margins")
    return float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y))


def _saccade_track(rng: np.random.Generator, cfg: TrajectoryConfig, n: int) -> tuple[np.ndarray, np.ndarray]:
    margin = cfg.radius + 1.0
    peak = cfg.saccade_peak_deg_s * cfg.px_per_deg / TICKS_PER_SECOND  # px per tick
    max_amp = peak * 20 / 2.0  # raised-cosine profile: peak velocity = 2A/D, D <= 20 ticks
    x, y = _place(rng, cfg, margin + 1, margin + 1)
    cx = np.empty(n)
    cy = np.empty(n)
    k = 0
    while k < n:
        dwell = int(rng.integers(cfg.fixation_ms[0], cfg.fixation_ms[1] + 1))
        end = min(n, k + dwell)
        cx[k:end], cy[k:end] = x, y
        k = end
        if k >= n:
            break
        for _ in range(100):
            amp = rng.uniform(0.3, 1.0) * max_amp
            ang = rng.uniform(0, 2 * math.pi)
            tx, ty = x + amp * math.cos(ang), y + amp * math.sin(ang)
            if margin <= tx <= cfg.width - 1 - margin and margin <= ty <= cfg.height - 1 - margin:
                break
        else:
            tx, ty = x, y
            amp = 0.0
        dur = max(1, min(20, math.ceil(2 * amp / peak))) if amp else 1
        tau = np.arange(1, dur + 1) / dur
        s = tau - np.sin(2 * math.pi * tau) / (2 * math.pi)
        end = min(n, k + dur)
        cx[k:end] = x + (tx - x) * s[: end - k]
        cy[k:end] = y + (ty - y) * s[: end - k]
        k = end
        x, y = tx, ty
    return cx, cy


def gen_trajectory(cfg: TrajectoryConfig) -> SceneState:
    """Per-tick pupil center and eye-open flag for one session."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_ticks
    t = np.arange(n) / TICKS_PER_SECOND
    eye_open = np.ones(n, dtype=bool)
    if cfg.kind == "smooth_pursuit":
        x0, y0 = _place(rng, cfg, cfg.radius + cfg.amplitude + 1, cfg.radius + cfg.amplitude_y + 1)
        freq = cfg.pursuit_speed / (2 * math.pi * cfg.amplitude)
        phase = 2 * math.pi * freq * t
        cx = x0 + cfg.amplitude * np.sin(phase)
        cy = y0 + cfg.amplitude_y * np.sin(cfg.pursuit_y_ratio * phase)
    elif cfg.kind == "saccade_mix":
        cx, cy = _saccade_track(rng, cfg, n)
    else:
        x0, y0 = _place(rng, cfg, cfg.radius + 2, cfg.radius + 2)
        cx = np.full(n, x0)
        cy = np.full(n, y0)
        if cfg.kind == "blink_cycle":
            k = int(rng.integers(cfg.blink_period_ms[0], cfg.blink_period_ms[1] + 1)) // 2
            while k < n:
                dur = int(rng.integers(cfg.blink_ms[0], cfg.blink_ms[1] + 1))
                eye_open[k : k + dur] = False
                k += int(rng.integers(cfg.blink_period_ms[0], cfg.blink_period_ms[1] + 1))
    if cfg.kind != "smooth_pursuit":
        j = _jitter(rng, n, cfg.jitter_rms, cfg.jitter_tau_ms)
        cx = cx + j[0]
        cy = cy + j[1]
    r = cfg.radius
    if n and (cx.min() < r or cy.min() < r or cx.max() > cfg.width - 1 - r or cy.max() > cfg.height - 1 - r):
        raise ConfigError("trajectory comes closer than one pupil radius to the sensor border")
    return SceneState(cx, cy, eye_open)


def disc_mask(cx: float, cy: float, r: float, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    """Membership of pixels [y0, y0+h) x [x0, x0+w) in the disc, as [h, w] bools."""
    xs = np.arange(x0, x0 + w) - cx
    ys = np.arange(y0, y0 + h) - cy
    return (ys[:, None] ** 2 + xs[None, :] ** 2) <= r * r


def _box(cfg: TrajectoryConfig, centers) -> tuple[int, int, int, int]:
    r = cfg.radius
    xs = [c[0] for c in centers]
    ys = [c[1] for c in centers]
    x0 = max(0, math.floor(min(xs) - r))
    y0 = max(0, math.floor(min(ys) - r))
    x1 = min(cfg.width, math.ceil(max(xs) + r) + 1)
    y1 = min(cfg.height, math.ceil(max(ys) + r) + 1)
    return x0, y0, x1 - x0, y1 - y0


def tick_changes(scene: SceneState, cfg: TrajectoryConfig, k: int):
    """Pixels that change pupil membership at tick k: (xs, ys, polarity)."""
    if not scene.eye_open[k]:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int8)
    now = (scene.cx[k], scene.cy[k])
    prev_visible = k > 0 and scene.eye_open[k - 1]
    if prev_visible:
        prev = (scene.cx[k - 1], scene.cy[k - 1])
        if prev == now:
            return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int8)
        x0, y0, w, h = _box(cfg, [now, prev])
        before = disc_mask(prev[0], prev[1], cfg.radius, x0, y0, w, h)
    else:
        x0, y0, w, h = _box(cfg, [now])
        before = np.zeros((h, w), dtype=bool)
    after = disc_mask(now[0], now[1], cfg.radius, x0, y0, w, h)
    changed = before != after
    ys, xs = np.nonzero(changed)
    pol = np.where(after[ys, xs], -1, 1).astype(np.int8)
    return xs + x0, ys + y0, pol


def render_events(scene: SceneState, cfg: TrajectoryConfig) -> tuple[EventStream, LabelTrack]:
    """Event stream plus 100 Hz labels for a simulated scene."""
    rng = np.random.default_rng([cfg.seed, 1])
    ts, xs, ys, ps = [], [], [], []
    n = len(scene)
    for k in range(n):
        x, y, p = tick_changes(scene, cfg, k)
        if cfg.noise_rate > 0:
            m = int(rng.poisson(cfg.noise_rate / TICKS_PER_SECOND))
            if m:
                x = np.concatenate([x, rng.integers(0, cfg.width, m)])
                y = np.concatenate([y, rng.integers(0, cfg.height, m)])
                p = np.concatenate([p, rng.choice(np.array([-1, 1], np.int8), m)])
        if x.size == 0:
            continue
        t = k * TICK_US + rng.integers(0, TICK_US, x.size)
        order = np.argsort(t, kind="stable")
        ts.append(t[order])
        xs.append(x[order])
        ys.append(y[order])
        ps.append(p[order])
    cat = (lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dt))
    stream = EventStream(cfg.width, cfg.height, cat(ts, np.int64), cat(xs, np.int64), cat(ys, np.int64), cat(ps, np.int8))
    n_labels = int(round(n * LABEL_RATE_HZ / TICKS_PER_SECOND))
    ticks = np.arange(n_labels) * (TICKS_PER_SECOND // int(LABEL_RATE_HZ))
    labels = LabelTrack(
        LABEL_RATE_HZ,
        ticks * TICK_US,
        scene.cx[ticks],
        scene.cy[ticks],
        (~scene.eye_open[ticks]).astype(np.int64),
    )
    return stream, labels


def simulate(cfg: TrajectoryConfig) -> tuple[EventStream, LabelTrack]:
    return render_events(gen_trajectory(cfg), cfg)


# ---------------------------------------------------------------- fixtures

FIXTURE_NAME = "synthetic-13"


def fixture_configs(base_seed: int = 13, n_sessions: int = 13, total_seconds: float = 60.0) -> list[TrajectoryConfig]:
    """Session configs of the ``synthetic-13`` fixture: all four kinds, ~60 s total."""
    order = ["saccade_mix", "smooth_pursuit", "fixation", "saccade_mix", "blink_cycle", "smooth_pursuit"]
    dur = round(total_seconds / n_sessions, 3)
    rng = np.random.default_rng(base_seed)
    out = []
    for i in range(n_sessions):
        kind = order[i % len(order)]
        extra = {}
        if kind == "smooth_pursuit":
            extra = dict(
                amplitude=float(rng.uniform(100, 200)),
                amplitude_y=float(rng.uniform(60, 140)),
                pursuit_speed=float(rng.uniform(250, 500)),
                pursuit_y_ratio=float(rng.choice([0.5, 0.75, 1.5])),
            )
        out.append(TrajectoryConfig(kind=kind, duration=dur, seed=base_seed * 1000 + i, **extra))
    return out


def config_to_dict(cfg: TrajectoryConfig) -> dict:
    d = asdict(cfg)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def config_from_dict(d: dict) -> TrajectoryConfig:
    tuples = {"center", "fixation_ms", "blink_period_ms", "blink_ms"}
    kw = {k: (tuple(v) if k in tuples and v is not None else v) for k, v in d.items()}
    return TrajectoryConfig(**kw)


def session_name(cfg: TrajectoryConfig, index: int | None = None) -> str:
    stem = f"{cfg.kind}_s{cfg.seed}"
    return stem if index is None else f"{index:02d}_{stem}"


def write_session(cfg: TrajectoryConfig, out_dir, name: str | None = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = name or session_name(cfg)
    stream, labels = simulate(cfg)
    ev, lb = out / f"{name}.evt", out / f"{name}.csv"
    write_events(stream, ev)
    write_labels(labels, lb)
    return ev, lb


def write_fixture(out_dir, configs: list[TrajectoryConfig] | None = None, name: str = FIXTURE_NAME) -> Path:
    """Write every session plus a ``fixture.json`` manifest listing seeds and configs."""
    configs = configs if configs is not None else fixture_configs()
    out = Path(out_dir)
    sessions = []
    for i, cfg in enumerate(configs):
        stem = session_name(cfg, i)
        write_session(cfg, out, stem)
        sessions.append({"name": stem, "config": config_to_dict(cfg)})
    manifest = out / "fixture.json"
    manifest.write_text(json.dumps({"fixture": name, "sessions": sessions}, indent=2, sort_keys=True) + "\n")
    return manifest
