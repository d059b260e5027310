"""Network-facing tensors: event images and normalised intensity frames."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .events import EventStream, slice_window


@dataclass(frozen=True, eq=False)
class EventImage:
    resolution: tuple[int, int]
    on_counts: np.ndarray   # (height, width)
    off_counts: np.ndarray  # (height, width)

    def __post_init__(self):
        w, h = self.resolution
        for name in ("on_counts", "off_counts"):
            a = np.asarray(getattr(self, name), dtype=np.int64)
            if a.shape != (h, w):
                raise ValueError(f"{name} has shape {a.shape}, expected {(h, w)}")
            if a.size and a.min() < 0:
                raise ValueError(f"{name} must be non-negative")
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __eq__(self, other):
        if not isinstance(other, EventImage):
            return NotImplemented
        return (self.resolution == other.resolution
                and np.array_equal(self.on_counts, other.on_counts)
                and np.array_equal(self.off_counts, other.off_counts))

    def __add__(self, other: "EventImage") -> "EventImage":
        if self.resolution != other.resolution:
            raise ValueError("resolution mismatch")
        return EventImage(self.resolution, self.on_counts + other.on_counts,
                          self.off_counts + other.off_counts)


def stack_events(stream: EventStream, t_start: int, t_end: int) -> EventImage:
    """Per-pixel ON/OFF event counts over ``[t_start, t_end)``."""
    window = slice_window(stream, t_start, t_end)
    w, h = stream.resolution
    flat = window.y * w + window.x
    on = np.bincount(flat[window.p > 0], minlength=w * h).reshape(h, w)
    off = np.bincount(flat[window.p < 0], minlength=w * h).reshape(h, w)
    return EventImage((w, h), on, off)


def to_network_tensor(image: EventImage, dtype=np.float32) -> np.ndarray:
    """3-channel (ON, OFF, zero) tensor normalised by the window's peak count."""
    peak = max(1, int(image.on_counts.max(initial=0)), int(image.off_counts.max(initial=0)))
    h, w = image.on_counts.shape
    out = np.zeros((3, h, w), dtype=dtype)
    out[0] = image.on_counts / peak
    out[1] = image.off_counts / peak
    return out


def preprocess_frame(frame: np.ndarray, dtype=np.float32) -> np.ndarray:
    """8-bit grayscale (H, W) or RGB (H, W, 3) frame -> (3, H, W) in [0, 1]."""
    a = np.asarray(frame)
    if a.ndim == 2:
        a = np.broadcast_to(a, (3,) + a.shape)
    elif a.ndim == 3 and a.shape[2] == 3:
        a = np.moveaxis(a, 2, 0)
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) frame, got shape {a.shape}")
    return (a.astype(np.float64) / 255.0).astype(dtype)


def frame_windows(timestamps) -> list[tuple[int, int]]:
    """Event window aligned to each frame: ``[t_i, t_{i+1})``.

    The last frame reuses the preceding inter-frame interval.
    """
    ts = [int(t) for t in timestamps]
    if len(ts) == 1:
        return [(ts[0], ts[0] + 1)]
    wins = list(zip(ts, ts[1:]))
    wins.append((ts[-1], ts[-1] + (ts[-1] - ts[-2])))
    return wins


class EventFrameEncoder(BaseEstimator, TransformerMixin):
    """Turns an event stream into one network tensor per time window."""

    def __init__(self, dtype="float32"):
        self.dtype = dtype

    def fit(self, X: EventStream, y=None):
        self.resolution_ = X.resolution
        self.stream_ = X
        return self

    def transform(self, windows) -> np.ndarray:
        if not hasattr(self, "stream_"):
            raise AttributeError("EventFrameEncoder is not fitted; call fit(stream) first")
        return np.stack([to_network_tensor(stack_events(self.stream_, a, b), self.dtype)
                         for a, b in windows])
