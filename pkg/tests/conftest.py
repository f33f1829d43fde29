import numpy as np
import pytest

from evtrack.event_core import EventStream, LabelTrack


def random_stream(rng, n=1000, width=16, height=12, t_max=400_000):
    t = np.sort(rng.integers(0, t_max, n))
    return EventStream(
        width,
        height,
        t,
        rng.integers(0, width, n),
        rng.integers(0, height, n),
        rng.choice(np.array([-1, 1]), n),
    )


def regular_track(n, rate_hz=100.0, width=640.0, height=480.0, seed=0, close=None):
    rng = np.random.default_rng(seed)
    period = int(round(1e6 / rate_hz))
    return LabelTrack(
        rate_hz,
        np.arange(n) * period,
        rng.uniform(0, width, n),
        rng.uniform(0, height, n),
        np.zeros(n, np.int64) if close is None else close,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
