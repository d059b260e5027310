"""Event data model, text file format and time-window slicing.

File layout (ASCII, ``\\n`` line endings)::

    # optional comment lines start with '#'
    <width> <height>
    <t>,<x>,<y>,<p>
    ...

Timestamps are integer microseconds, ``p`` is ``1`` or ``-1``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

_HEADER_RE = re.compile(r"^(\d+) (\d+)$")
_EVENT_RE = re.compile(r"^(\d+),(-?\d+),(-?\d+),([+-]?\d+)$")


class EventFileError(ValueError):
    """Raised for malformed or invariant-violating event files."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EventStream:
    """Immutable, time-ordered stream of polarity events.

    Columns are stored as parallel int64 arrays; ``events`` gives the
    per-event view.
    """

    resolution: tuple[int, int]
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        w, h = (int(v) for v in self.resolution)
        if w <= 0 or h <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        object.__setattr__(self, "resolution", (w, h))
        cols = {}
        for name in ("t", "x", "y", "p"):
            col = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
            cols[name] = col
        n = {len(c) for c in cols.values()}
        if len(n) != 1:
            raise ValueError("event columns must have equal length")
        for name, col in cols.items():
            object.__setattr__(self, name, _frozen(col.copy()))
        _check_invariants(self)

    @classmethod
    def from_events(cls, resolution, events: Iterable[Event | tuple]) -> "EventStream":
        rows = [tuple(e) for e in events]
        if not rows:
            return cls.empty(resolution)
        arr = np.array(rows, dtype=np.int64)
        return cls(resolution, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])

    @classmethod
    def empty(cls, resolution) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(resolution, z, z, z, z)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def events(self) -> list[Event]:
        return [Event(int(t), int(x), int(y), int(p))
                for t, x, y, p in zip(self.t, self.x, self.y, self.p)]

    def __iter__(self):
        return iter(self.events)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.resolution == other.resolution
                and all(np.array_equal(getattr(self, c), getattr(other, c))
                        for c in ("t", "x", "y", "p")))

    def __repr__(self) -> str:
        return f"EventStream(resolution={self.resolution}, n_events={len(self)})"


def _check_invariants(s: EventStream) -> None:
    w, h = s.resolution
    if len(s) == 0:
        return
    if s.t.min() < 0:
        raise ValueError("timestamps must be non-negative")
    if np.any(np.diff(s.t) < 0):
        raise ValueError("timestamps must be non-decreasing")
    if s.x.min() < 0 or s.x.max() >= w or s.y.min() < 0 or s.y.max() >= h:
        raise ValueError(f"event coordinates outside resolution {s.resolution}")
    if not np.all(np.abs(s.p) == 1):
        raise ValueError("polarity must be +1 or -1")


def parse_event_file(data: bytes | str) -> EventStream:
    """Parse the text event format into an :class:`EventStream`.

    Errors carry the 1-based line number of the offending line.
    """
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EventFileError(f"not valid UTF-8: {exc}") from None
    else:
        text = data

    resolution = None
    rows: list[tuple[int, int, int, int]] = []
    last_t = -1
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line or line.startswith("#"):
            continue
        if resolution is None:
            m = _HEADER_RE.match(line)
            if m is None:
                raise EventFileError(f"expected 'width height' header, got {line!r}", lineno)
            resolution = (int(m.group(1)), int(m.group(2)))
            if resolution[0] <= 0 or resolution[1] <= 0:
                raise EventFileError(f"resolution must be positive, got {resolution}", lineno)
            continue
        m = _EVENT_RE.match(line)
        if m is None:
            raise EventFileError(f"malformed event line {line!r} (expected t,x,y,p)", lineno)
        t, x, y, p = (int(g) for g in m.groups())
        if p not in (1, -1):
            raise EventFileError(f"polarity {p} not in {{1,-1}}", lineno)
        if not 0 <= x < resolution[0]:
            raise EventFileError(f"x={x} out of range for width {resolution[0]}", lineno)
        if not 0 <= y < resolution[1]:
            raise EventFileError(f"y={y} out of range for height {resolution[1]}", lineno)
        if t < last_t:
            raise EventFileError(f"timestamp {t} decreases (previous {last_t})", lineno)
        last_t = t
        rows.append((t, x, y, p))

    if resolution is None:
        raise EventFileError("missing 'width height' header")
    return EventStream.from_events(resolution, rows)


def serialize_event_stream(stream: EventStream) -> bytes:
    w, h = stream.resolution
    lines = [f"{w} {h}"]
    lines.extend(f"{t},{x},{y},{p}" for t, x, y, p in
                 zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist()))
    return ("\n".join(lines) + "\n").encode("ascii")


def slice_window(stream: EventStream, t_start: int, t_end: int) -> EventStream:
    """Events with ``t_start <= t < t_end``, order preserved."""
    if t_start > t_end:
        raise ValueError(f"t_start ({t_start}) > t_end ({t_end})")
    lo = np.searchsorted(stream.t, t_start, side="left")
    hi = np.searchsorted(stream.t, t_end, side="left")
    return EventStream(stream.resolution, stream.t[lo:hi], stream.x[lo:hi],
                       stream.y[lo:hi], stream.p[lo:hi])


def read_event_file(path) -> EventStream:
    with open(path, "rb") as fh:
        return parse_event_file(fh.read())
