"""Online tracking: sampling, RoI pooling, fused classifier and update loop."""
from .core import (SampleMemory, TrackerConfig, TrackerState, VisEventTracker, init_first_frame,
                   online_update, run_sequence, select_box, step, track_frame, update_trigger)
from .head import Classifier, TrackerHead, positive_score
from .roi import roi_align, roi_align_backward
from .sampling import (InsufficientSamplesError, collect_samples, label_samples, sample_proposals,
                       sample_uniform, select_hard_negatives)

__all__ = [
    "Classifier", "InsufficientSamplesError", "SampleMemory", "TrackerConfig", "TrackerHead",
    "TrackerState", "VisEventTracker", "collect_samples", "init_first_frame", "label_samples",
    "online_update", "positive_score", "roi_align", "roi_align_backward", "run_sequence",
    "sample_proposals", "sample_uniform", "select_box", "select_hard_negatives", "step",
    "track_frame", "update_trigger",
]
