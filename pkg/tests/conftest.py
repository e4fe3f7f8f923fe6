import numpy as np
import pytest

from eventfly.events import EventStream


def random_stream(rng, n=None, width=None, height=None, t_span=None):
    width = width or int(rng.integers(1, 65))
    height = height or int(rng.integers(1, 65))
    n = int(rng.integers(0, 2000)) if n is None else n
    t_span = t_span or int(rng.integers(1, 10_000_000))
    t = np.sort(rng.integers(0, t_span, n)) + int(rng.integers(0, 1000))
    return EventStream(
        width,
        height,
        rng.integers(0, width, n),
        rng.integers(0, height, n),
        t,
        rng.choice(np.array([-1, 1]), n),
    )


def naive_voxelize(stream, bins, duration):
    """Per-event loop over every bin; no vectorisation, no shared code."""
    grid = np.zeros((bins, stream.height, stream.width), np.float64)
    t0 = int(stream.t[0]) if len(stream) else 0
    for x, y, t, p in zip(stream.x, stream.y, stream.t, stream.p):
        t_hat = (bins - 1) * (int(t) - t0) / duration
        t_hat = min(max(t_hat, 0.0), bins - 1)
        for b in range(bins):
            grid[b, y, x] += int(p) * max(1.0 - abs(t_hat - b), 0.0)
    return grid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
