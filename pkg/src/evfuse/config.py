"""Run configuration: every tunable in one validated, JSON-loadable object."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .simulator import SimulatorConfig
from .tracker.core import TrackerConfig

_SIM_KEYS = ("theta", "eps")
_RUN_KEYS = ("weights", "log_level")


@dataclass
class RunConfig:
    theta: float = 0.2
    eps: float = 0.5
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    weights: str | None = None
    log_level: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        # both constructors raise ValueError with a description of the bad field
        SimulatorConfig(self.theta, self.eps)
        self.tracker.validate()
        if self.weights is not None and not isinstance(self.weights, str):
            raise ValueError(f"weights must be a path string, got {self.weights!r}")
        if self.log_level not in (None, "quiet", "info", "debug"):
            raise ValueError(f"log_level must be quiet, info or debug, got {self.log_level!r}")

    @property
    def simulator(self) -> SimulatorConfig:
        return SimulatorConfig(self.theta, self.eps)

    @classmethod
    def from_dict(cls, d: dict, overrides: dict | None = None) -> "RunConfig":
        """Flat dict of keys (simulator, tracker and run keys mixed); overrides win."""
        merged = dict(d)
        merged.update(overrides or {})
        tracker_keys = {f.name for f in fields(TrackerConfig)}
        unknown = sorted(set(merged) - tracker_keys - set(_SIM_KEYS) - set(_RUN_KEYS))
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        tracker = TrackerConfig.from_dict({k: v for k, v in merged.items() if k in tracker_keys})
        rest = {k: v for k, v in merged.items() if k in _SIM_KEYS or k in _RUN_KEYS}
        return cls(tracker=tracker, **rest)

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ValueError(f"{path}: top level must be a JSON object")
        return cls.from_dict(data, overrides)

    def to_dict(self) -> dict:
        out = {"theta": self.theta, "eps": self.eps, "weights": self.weights, "log_level": self.log_level}
        out.update(self.tracker.to_dict())
        return out


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with the value read as JSON when possible, else as a string."""
    if "=" not in text:
        raise ValueError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
