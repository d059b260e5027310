"""Visible + event single-object tracking."""
from .boxes import BBox
from .events import Event, EventFileError, EventStream, parse_event_file, serialize_event_stream, slice_window
from .evaluation import evaluate_dataset, evaluate_sequence, precision_curve, success_curve
from .fusion import CMTWeights, cmt_fuse, early_fuse, late_fuse, middle_fuse
from .representation import EventImage, preprocess_frame, stack_events, to_network_tensor
from .simulator import EventSimulator, IntensityFrame, SimulatorConfig, simulate_events
from .tracker import TrackerConfig, VisEventTracker, run_sequence

__version__ = "0.1.0"

__all__ = [
    "BBox", "CMTWeights", "Event", "EventFileError", "EventImage", "EventSimulator", "EventStream",
    "IntensityFrame", "SimulatorConfig", "TrackerConfig", "VisEventTracker", "cmt_fuse", "early_fuse",
    "evaluate_dataset", "evaluate_sequence", "late_fuse", "middle_fuse", "parse_event_file",
    "precision_curve", "preprocess_frame", "run_sequence", "serialize_event_stream", "simulate_events",
    "slice_window", "stack_events", "success_curve", "to_network_tensor",
]
