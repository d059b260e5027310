"""Synthetic moving-square sequences for smoke tests and demos."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import BBox
from .events import EventStream
from .representation import frame_windows, preprocess_frame, stack_events, to_network_tensor
from .simulator import IntensityFrame, SimulatorConfig, simulate_events


@dataclass
class SyntheticSequence:
    frames: list  # uint8 (H, W)
    timestamps: list
    boxes: list  # ground-truth BBox per frame
    events: EventStream

    def frame_tensors(self, dtype=np.float32) -> list:
        return [preprocess_frame(f, dtype) for f in self.frames]

    def event_tensors(self, dtype=np.float32) -> list:
        return [to_network_tensor(stack_events(self.events, a, b), dtype)
                for a, b in frame_windows(self.timestamps)]


def _bounce(start: int, steps: int, speed: int, limit: int) -> list[int]:
    """Positions moving ``speed`` px per step, reflecting inside [0, limit]."""
    pos, v, out = start, speed, []
    for _ in range(steps):
        out.append(pos)
        nxt = pos + v
        if nxt < 0 or nxt > limit:
            v = -v
            nxt = pos + v
        pos = nxt
    return out


def _coverage(lo: float, size: int, n: int) -> np.ndarray:
    """Fraction of each unit pixel [i, i+1) covered by the interval [lo, lo+size)."""
    edges = np.arange(n + 1, dtype=np.float64)
    return np.clip(np.minimum(edges[1:], lo + size) - np.maximum(edges[:-1], lo), 0.0, 1.0)


def render_square(x: float, y: float, canvas: int, size: int, brightness: int, background: int) -> np.ndarray:
    """Area-weighted rendering, so sub-pixel positions shade the border pixels."""
    cov = np.outer(_coverage(y, size, canvas), _coverage(x, size, canvas))
    return np.rint(background + (brightness - background) * cov).astype(np.uint8)


def square_path(path: str, n_frames: int, canvas: int, size: int, speed: float, start=(8, 52)):
    """Top-left positions for ``circle`` (one closed loop at constant speed) or ``bounce``."""
    if path == "bounce":
        xs = _bounce(int(start[0]), n_frames, int(speed), canvas - size)
        return [(float(x), float(start[1])) for x in xs]
    if path == "circle":
        radius = speed * n_frames / (2 * np.pi)
        c = (canvas - size) / 2
        if radius > c:
            raise ValueError(f"a {n_frames}-frame loop at {speed} px/frame does not fit the canvas")
        ang = np.arange(n_frames) * speed / radius
        return [(float(c + radius * np.cos(a)), float(c + radius * np.sin(a))) for a in ang]
    raise ValueError(f"unknown path {path!r}")


def moving_square(n_frames: int = 60, canvas: int = 128, size: int = 24, brightness: int = 255,
                  background: int = 128, speed: float = 3, path: str = "bounce",
                  frame_interval: int = 10_000, theta: float = 0.2, eps: float = 0.5,
                  start=(8, 52)) -> SyntheticSequence:
    """A ``size``-pixel square moving ``speed`` px/frame over a uniform background.

    ``path="bounce"`` (integer steps) slides horizontally and reflects off
    the borders; ``path="circle"`` traces one loop at sub-pixel positions. Events come from the log-intensity
    simulator at contrast ``theta``.
    """
    frames, boxes = [], []
    for x, y in square_path(path, n_frames, canvas, size, speed, start):
        frames.append(render_square(x, y, canvas, size, brightness, background))
        boxes.append(BBox(x, y, size, size))
    timestamps = [i * frame_interval for i in range(n_frames)]
    events = simulate_events([IntensityFrame(t, f.astype(np.float64)) for t, f in zip(timestamps, frames)],
                             SimulatorConfig(theta, eps))
    return SyntheticSequence(frames, timestamps, boxes, events)
