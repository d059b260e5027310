"""Ideal log-intensity DVS model: turn timed intensity frames into events."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .events import EventStream


@dataclass(frozen=True)
class IntensityFrame:
    t: int
    pixels: np.ndarray  # (height, width), values in [0, 255]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError(f"frame pixels must be 2-D, got shape {px.shape}")
        if px.size and (px.min() < 0 or px.max() > 255 or not np.all(np.isfinite(px))):
            raise ValueError("frame pixels must lie within [0, 255]")
        if int(self.t) < 0:
            raise ValueError("frame timestamp must be non-negative")
        object.__setattr__(self, "t", int(self.t))
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class SimulatorConfig:
    theta: float = 0.2
    eps: float = 0.5

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"theta must be > 0, got {self.theta}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")


def log_intensity(pixels: np.ndarray, eps: float) -> np.ndarray:
    return np.log(np.maximum(pixels, eps))


def _check_frames(frames: Sequence[IntensityFrame]) -> None:
    if len(frames) < 2:
        raise ValueError(f"need at least 2 frames, got {len(frames)}")
    shape = frames[0].pixels.shape
    for prev, cur in zip(frames, frames[1:]):
        if cur.t <= prev.t:
            raise ValueError(f"frame timestamps must strictly increase ({prev.t} -> {cur.t})")
        if cur.pixels.shape != shape:
            raise ValueError(f"resolution mismatch: {cur.pixels.shape} vs {shape}")


def simulate_events(frames: Sequence[IntensityFrame],
                    config: SimulatorConfig = SimulatorConfig()) -> EventStream:
    """Convert a frame sequence into an event stream.

    Each pixel keeps a reference log intensity, initialised from the first
    frame. A change of ``k * theta`` against the reference emits ``k`` events
    spread evenly over ``(t_prev, t_new]``; the reference then moves by
    ``k * theta`` so the sub-threshold residual carries over.

    Events are ordered by timestamp, then by raster position (row, column).
    """
    _check_frames(frames)
    h, w = frames[0].pixels.shape
    theta = float(config.theta)
    # reference = base + steps * theta; an integer step count keeps a return
    # to an earlier level exact instead of drifting by rounding
    base = log_intensity(frames[0].pixels, config.eps)
    steps = np.zeros((h, w), dtype=np.int64)

    chunks = []
    for prev, cur in zip(frames, frames[1:]):
        delta = (log_intensity(cur.pixels, config.eps) - base) - steps * theta
        k = np.floor(np.abs(delta) / theta).astype(np.int64)
        sign = np.sign(delta).astype(np.int64)
        steps += k * sign

        ys, xs = np.nonzero(k)
        if len(ys) == 0:
            continue
        counts = k[ys, xs]
        # event i (1-based) of a pixel with k events fires at t_prev + i*dt//k
        rep = np.repeat(np.arange(len(ys)), counts)
        starts = np.cumsum(counts) - counts
        i = np.arange(len(rep)) - starts[rep] + 1
        dt = cur.t - prev.t
        t = prev.t + (i * dt) // counts[rep]
        chunks.append((t, xs[rep], ys[rep], sign[ys, xs][rep]))

    if not chunks:
        return EventStream.empty((w, h))
    t, x, y, p = (np.concatenate(c) for c in zip(*chunks))
    order = np.lexsort((x, y, t))
    return EventStream((w, h), t[order], x[order], y[order], p[order])


class EventSimulator(BaseEstimator, TransformerMixin):
    """Estimator wrapper around :func:`simulate_events`.

    ``transform`` takes a sequence of :class:`IntensityFrame` (or a pair of
    ``(pixels, timestamps)``) and returns an :class:`EventStream`.
    """

    def __init__(self, theta: float = 0.2, eps: float = 0.5):
        self.theta = theta
        self.eps = eps

    def fit(self, X=None, y=None):
        self.config_ = SimulatorConfig(self.theta, self.eps)
        return self

    def transform(self, X, timestamps=None):
        if not hasattr(self, "config_"):
            self.fit()
        if timestamps is not None:
            X = [IntensityFrame(t, px) for t, px in zip(timestamps, X)]
        return simulate_events(list(X), self.config_)
