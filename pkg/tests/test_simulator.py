import math

import numpy as np
import pytest

from evfuse.simulator import EventSimulator, IntensityFrame, SimulatorConfig, simulate_events


def oracle_events(frames, theta, eps):
    """Per-pixel scalar loop with math.log; no numpy on the event path."""
    h, w = len(frames[0][1]), len(frames[0][1][0])
    out = []
    for y in range(h):
        for x in range(w):
            base = math.log(max(float(frames[0][1][y][x]), eps))
            n = 0  # reference level = base + n * theta
            for (t0, _), (t1, px) in zip(frames, frames[1:]):
                delta = (math.log(max(float(px[y][x]), eps)) - base) - n * theta
                k = math.floor(abs(delta) / theta)
                sign = (delta > 0) - (delta < 0)
                n += k * sign
                for i in range(1, k + 1):
                    out.append((t0 + (i * (t1 - t0)) // k, x, y, sign))
    out.sort(key=lambda e: (e[0], e[2], e[1]))
    return out


def _frames(pixels, times):
    return [IntensityFrame(t, p) for t, p in zip(times, pixels)]


def test_identical_frames_no_events():
    px = np.full((3, 4), 90.0)
    s = simulate_events(_frames([px, px], [0, 1000]))
    assert len(s) == 0 and s.resolution == (4, 3)


@pytest.mark.parametrize("a,b,pol", [(100.0, 200.0, 1), (200.0, 100.0, -1)])
def test_single_pixel_doubling(a, b, pol):
    s = simulate_events(_frames([np.array([[a]]), np.array([[b]])], [0, 300]),
                        SimulatorConfig(theta=0.2, eps=0.5))
    delta = math.log(b) - math.log(a)
    k = math.floor(abs(delta) / 0.2)
    assert k == 3
    assert [e.p for e in s.events] == [pol] * 3
    assert [e.t for e in s.events] == [100, 200, 300]
    assert oracle_events([(0, [[a]]), (300, [[b]])], 0.2, 0.5) == [tuple(e) for e in s.events]


def test_residual_carries_over():
    # 100 -> 200 leaves ln2 - 0.6 = 0.0931; a further x1.12 (ln ~0.1133) crosses
    frames = [np.array([[100.0]]), np.array([[200.0]]), np.array([[224.0]])]
    s = simulate_events(_frames(frames, [0, 10, 20]), SimulatorConfig(0.2, 0.5))
    assert [e.p for e in s.events] == [1, 1, 1, 1]
    assert s.events[-1].t == 20


@pytest.mark.parametrize("seed", range(5))
def test_matches_oracle_random(seed):
    rng = np.random.default_rng(seed)
    pix = rng.integers(0, 256, (10, 8, 8)).astype(float)
    times = np.cumsum(rng.integers(1, 500, 10)).tolist()
    s = simulate_events(_frames(pix, times))
    ref = oracle_events(list(zip(times, pix.tolist())), 0.2, 0.5)
    assert [tuple(e) for e in s.events] == ref


def test_errors():
    px = np.zeros((2, 2))
    with pytest.raises(ValueError):
        simulate_events(_frames([px], [0]))
    with pytest.raises(ValueError):
        simulate_events(_frames([px, px], [5, 5]))
    with pytest.raises(ValueError):
        simulate_events(_frames([px, np.zeros((2, 3))], [0, 1]))
    with pytest.raises(ValueError):
        SimulatorConfig(theta=0)
    with pytest.raises(ValueError):
        IntensityFrame(0, np.full((2, 2), 256.0))


def test_estimator_api():
    sim = EventSimulator(theta=0.3)
    assert sim.get_params() == {"theta": 0.3, "eps": 0.5}
    px = [np.full((2, 2), 50.0), np.full((2, 2), 150.0)]
    s = sim.fit().transform(px, timestamps=[0, 10])
    assert len(s) == 4 * math.floor(math.log(3) / 0.3)
