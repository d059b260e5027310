"""Online tracking-by-classification loop.

A shared, frozen backbone turns each modality into a feature map; RoI
align pools a 3x3 cell per candidate box; the head fuses the two
branches and scores them. The first frame trains the head from scratch,
later frames reuse the stored sample memory for periodic and
failure-triggered updates.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .. import fusion as fu
from ..boxes import BBox, as_box_array, clip_boxes
from ..nn import functional as F
from ..nn.backbone import Backbone, handcrafted_backbone, random_backbone
from .head import TrackerHead, positive_score
from .roi import roi_align
from .sampling import (collect_samples, label_samples, sample_proposals, sample_uniform,
                       select_hard_negatives)

logger = logging.getLogger(__name__)

MODALITIES = ("frame", "event", "both")
PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrackerConfig:
    fusion: str = "cmt"
    modality: str = "both"
    backbone: str = "handcrafted"
    image_scale: int = 1
    frame_mean: float = 0.5
    frame_contrast: float | None = 0.1
    roi_size: int = 3
    n_proposals: int = 256
    trans_sigma: float = 0.25
    scale_sigma: float = 0.05
    top_k: int = 5
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    n_pos_init: int = 500
    n_neg_init: int = 5000
    init_iters: int = 50
    n_pos_update: int = 50
    n_neg_update: int = 200
    update_iters: int = 15
    update_interval: int = 10
    short_term: int = 20
    long_term_pos: int = 100
    long_term_neg: int = 30
    batch_pos: int = 32
    batch_neg: int = 96
    hard_neg_factor: int = 4
    pos_trans_sigma: float = 0.1
    pos_scale_sigma: float = 0.1
    neg_trans_sigma: float = 1.0
    neg_scale_sigma: float = 0.3
    lr_init: float = 0.01
    lr_update: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    train_fusion: bool = False
    max_sample_rounds: int = 10
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.fusion not in fu.FUSION_STRATEGIES:
            problems.append(f"fusion must be one of {fu.FUSION_STRATEGIES}, got {self.fusion!r}")
        if self.modality not in MODALITIES:
            problems.append(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.backbone not in ("handcrafted", "random"):
            problems.append(f"backbone must be 'handcrafted' or 'random', got {self.backbone!r}")
        if self.precision not in PRECISIONS:
            problems.append(f"precision must be one of {tuple(PRECISIONS)}, got {self.precision!r}")
        positive_ints = ("image_scale", "roi_size", "n_proposals", "top_k", "n_pos_init", "n_neg_init",
                         "n_pos_update", "n_neg_update", "update_interval", "short_term", "long_term_pos",
                         "long_term_neg", "batch_pos", "batch_neg", "hard_neg_factor", "max_sample_rounds")
        for name in positive_ints:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                problems.append(f"{name} must be a positive integer, got {v!r}")
        for name in ("init_iters", "update_iters", "seed"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 0:
                problems.append(f"{name} must be a non-negative integer, got {v!r}")
        if isinstance(self.frame_mean, bool) or not isinstance(self.frame_mean, (int, float)) \
                or not 0 <= self.frame_mean <= 1:
            problems.append(f"frame_mean must lie in [0, 1], got {self.frame_mean!r}")
        fc = self.frame_contrast
        if fc is not None and (isinstance(fc, bool) or not isinstance(fc, (int, float)) or not fc > 0):
            problems.append(f"frame_contrast must be a positive number or null, got {fc!r}")
        for name in ("trans_sigma", "scale_sigma", "pos_trans_sigma", "pos_scale_sigma",
                     "neg_trans_sigma", "neg_scale_sigma", "lr_init", "lr_update", "momentum",
                     "weight_decay"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v) or v < 0:
                problems.append(f"{name} must be a finite non-negative number, got {v!r}")
        if not 0 <= self.neg_iou < self.pos_iou <= 1:
            problems.append(f"need 0 <= neg_iou < pos_iou <= 1, got {self.neg_iou}, {self.pos_iou}")
        if isinstance(self.top_k, int) and isinstance(self.n_proposals, int) and self.top_k > self.n_proposals:
            problems.append("top_k cannot exceed n_proposals")
        if self.short_term > max(self.long_term_pos, self.long_term_neg):
            problems.append("short_term window cannot exceed the memory length")
        if problems:
            raise ValueError("invalid tracker config: " + "; ".join(problems))

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown tracker config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SampleMemory:
    """Per-frame encoded samples; oldest frames are evicted first."""
    long_term_pos: int = 100
    long_term_neg: int = 30
    pos: deque = field(default_factory=deque)
    neg: deque = field(default_factory=deque)

    def add(self, frame: int, pos: np.ndarray | None, neg: np.ndarray | None) -> None:
        if pos is not None and len(pos):
            self.pos.append((frame, pos))
            while len(self.pos) > self.long_term_pos:
                self.pos.popleft()
        if neg is not None and len(neg):
            self.neg.append((frame, neg))
            while len(self.neg) > self.long_term_neg:
                self.neg.popleft()

    @staticmethod
    def _gather(entries, last: int | None):
        entries = list(entries)
        if last is not None:
            entries = entries[-last:]
        if not entries:
            return None
        return np.concatenate([e for _, e in entries])

    def positives(self, last: int | None = None):
        return self._gather(self.pos, last)

    def negatives(self, last: int | None = None):
        return self._gather(self.neg, last)

    def counts(self) -> tuple[int, int]:
        return sum(len(e) for _, e in self.pos), sum(len(e) for _, e in self.neg)


@dataclass
class TrackerState:
    config: TrackerConfig
    backbone: Backbone
    head: TrackerHead
    memory: SampleMemory
    prev_box: BBox
    rng: np.random.Generator
    image_size: tuple[int, int]
    frame: int = 0
    last_score: float = float("inf")
    history: list = field(default_factory=list)


# ---------------------------------------------------------------- features

def build_backbone(config: TrackerConfig, weights: dict | None = None) -> Backbone:
    in_ch = 6 if (config.modality == "both" and config.fusion == "early.concat") else 3
    if weights and any(k.startswith("backbone.") for k in weights):
        params = {k[len("backbone."):]: np.asarray(v) for k, v in weights.items() if k.startswith("backbone.")}
        bb = Backbone(params)
        if bb.spec.in_channels != in_ch:
            raise ValueError(f"backbone weights expect {bb.spec.in_channels} input channels, need {in_ch}")
    elif config.backbone == "handcrafted":
        bb = handcrafted_backbone(in_ch)
    else:
        bb = random_backbone(config.seed, in_ch)
    return bb.astype(config.dtype)


def _upsample(x: np.ndarray, scale: int) -> np.ndarray:
    if scale == 1:
        return x
    return np.repeat(np.repeat(x, scale, axis=-2), scale, axis=-1)


def feature_maps(backbone: Backbone, config: TrackerConfig, frame_tensor, event_tensor) -> list:
    """Backbone outputs for each branch the head expects.

    Intensity channels go through :func:`normalize_frame`; subtracting
    ``frame_mean`` makes a mid-gray background look like the zero padding
    at the image border.
    """
    dt = config.dtype
    prep = [_upsample(np.asarray(t, dtype=dt), config.image_scale) if t is not None else None
            for t in (frame_tensor, event_tensor)]
    if config.modality == "event":
        return [backbone(prep[1])]
    if config.modality == "frame":
        return [backbone(normalize_frame(prep[0], config))]
    if config.fusion == "early.add":
        return [backbone(normalize_frame(fu.early_fuse(prep[0], prep[1], "add").astype(dt), config))]
    if config.fusion == "early.concat":
        return [backbone(fu.early_fuse(normalize_frame(prep[0], config), prep[1], "concat").astype(dt))]
    return [backbone(normalize_frame(prep[0], config)), backbone(prep[1])]


def normalize_frame(x: np.ndarray, config: TrackerConfig) -> np.ndarray:
    """Subtract ``frame_mean``; optionally rescale to a fixed contrast.

    With ``frame_contrast`` set, the frame is scaled so its standard
    deviation equals that value, making low- and high-contrast scenes look
    alike to the classifier. Near-uniform frames (std < 1e-3) are only
    centred.
    """
    dt = x.dtype
    x = x - dt.type(config.frame_mean)
    if config.frame_contrast is not None:
        std = float(x.std())
        if std >= 1e-3:
            x = x * dt.type(config.frame_contrast / std)
    return x


def extract_rois(fmaps: list, boxes, config: TrackerConfig, stride: float) -> np.ndarray:
    """(N, B, C, roi_size**2) pooled features for boxes in image coordinates."""
    size = (config.roi_size, config.roi_size)
    boxes = as_box_array(boxes)
    return np.stack([fu.flatten_spatial(roi_align(f, boxes, stride, size)) for f in fmaps], axis=1)


def _stride(backbone: Backbone, config: TrackerConfig) -> float:
    return backbone.total_stride / config.image_scale


# ---------------------------------------------------------------- sampling

def _draw_positives(box, n, config, image_size, rng, strict):
    return collect_samples(
        lambda k: sample_proposals(box, k, config.pos_trans_sigma, config.pos_scale_sigma, image_size, rng),
        lambda c: label_samples(c, box, config.pos_iou, config.neg_iou) == 1,
        n, config.max_sample_rounds, strict)


def _draw_negatives(box, n, config, image_size, rng, strict, uniform_share=0.5):
    keep = lambda c: label_samples(c, box, config.pos_iou, config.neg_iou) == 0  # noqa: E731
    n_uni = int(round(n * uniform_share))
    parts = []
    if n - n_uni:
        parts.append(collect_samples(
            lambda k: sample_proposals(box, k, config.neg_trans_sigma, config.neg_scale_sigma, image_size, rng),
            keep, n - n_uni, config.max_sample_rounds, strict))
    if n_uni:
        parts.append(collect_samples(
            lambda k: sample_uniform(box, k, config.neg_scale_sigma, image_size, rng),
            keep, n_uni, config.max_sample_rounds, strict))
    return np.concatenate(parts)


# ---------------------------------------------------------------- training

def train_head(head: TrackerHead, pos: np.ndarray, neg: np.ndarray, iters: int, config: TrackerConfig,
               lr: float, rng: np.random.Generator) -> list[float]:
    """Minibatch SGD with hard-negative mining from a larger pool each step."""
    if iters == 0 or pos is None or neg is None or not len(pos) or not len(neg):
        return []
    opt = F.SGD(head.params, lr, config.momentum, config.weight_decay)
    pool_size = config.batch_neg * config.hard_neg_factor
    pos_order = rng.permutation(len(pos))
    neg_order = rng.permutation(len(neg))
    pi = ni = 0
    losses = []

    def take(order, idx, k, n):
        out = []
        while k > 0:
            if idx >= n:
                idx = 0
            step = min(k, n - idx)
            out.append(order[idx:idx + step])
            idx += step
            k -= step
        return np.concatenate(out), idx

    for _ in range(iters):
        pidx, pi = take(pos_order, pi, config.batch_pos, len(pos))
        nidx, ni = take(neg_order, ni, pool_size, len(neg))
        pool = neg[nidx]
        hard = select_hard_negatives(head.scores(pool), config.batch_neg)
        batch = np.concatenate([pos[pidx], pool[hard]])
        labels = np.concatenate([np.ones(len(pidx), np.int64), np.zeros(len(hard), np.int64)])
        logits = head.logits(batch, keep_cache=True)
        loss, dlogits = F.bce_loss(logits.astype(np.float64), labels)
        grads = head.backward(dlogits.astype(config.dtype))
        opt.step(grads)
        losses.append(loss)
    return losses


def init_first_frame(frame_tensor, event_tensor, gt_box: BBox, config: TrackerConfig | None = None,
                     rng: np.random.Generator | None = None, weights: dict | None = None,
                     cmt_weights: fu.CMTWeights | None = None) -> TrackerState:
    """Sample, encode and train on the first frame; returns the initial state."""
    config = config or TrackerConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    ref = frame_tensor if frame_tensor is not None else event_tensor
    height, width = np.shape(ref)[-2:]
    image_size = (int(width), int(height))
    gt_box = gt_box if isinstance(gt_box, BBox) else BBox.from_array(gt_box)
    if gt_box.x >= width or gt_box.y >= height or gt_box.x + gt_box.w <= 0 or gt_box.y + gt_box.h <= 0:
        raise ValueError(f"initial box {gt_box} lies outside the {width}x{height} image")

    backbone = build_backbone(config, weights)
    fmaps = feature_maps(backbone, config, frame_tensor, event_tensor)
    stride = _stride(backbone, config)
    channels = fmaps[0].shape[0]
    if weights:
        cmt_keys = {k[len("fusion."):]: v for k, v in weights.items() if k.startswith("fusion.")}
        if cmt_keys and config.fusion == "cmt" and cmt_weights is None:
            cmt_weights = fu.CMTWeights(cmt_keys)
    head = TrackerHead(config.fusion, config.modality, channels, config.roi_size ** 2, config.seed,
                       config.train_fusion, config.dtype, cmt_weights)
    if weights:
        load_head_weights(head, weights)

    pos = _draw_positives(gt_box, config.n_pos_init, config, image_size, rng, strict=True)
    neg = _draw_negatives(gt_box, config.n_neg_init, config, image_size, rng, strict=True)
    pos_enc = head.encode(extract_rois(fmaps, pos, config, stride))
    neg_enc = head.encode(extract_rois(fmaps, neg, config, stride))
    losses = train_head(head, pos_enc, neg_enc, config.init_iters, config, config.lr_init, rng)
    if losses:
        logger.debug("init: loss %.4f -> %.4f", losses[0], losses[-1])

    memory = SampleMemory(config.long_term_pos, config.long_term_neg)
    memory.add(0, pos_enc, neg_enc)
    state = TrackerState(config, backbone, head, memory, gt_box, rng, image_size)
    state.history.append(("init", 0))
    return state


def load_head_weights(head: TrackerHead, weights: dict) -> None:
    """Copy ``fusion.*`` / ``clf{i}.*`` arrays into the head (shape-checked)."""
    targets = head.all_params()
    for name, value in weights.items():
        if name.startswith("backbone."):
            continue
        if name not in targets:
            raise KeyError(f"weight {name!r} does not match any tracker parameter")
        value = np.asarray(value)
        if name.endswith("fc6.weight") or name.endswith("fc6.bias"):
            value = value[:1] if value.ndim == targets[name].ndim else value[None]
        if value.shape != targets[name].shape:
            raise ValueError(f"{name}: shape {value.shape} != {targets[name].shape}")
        targets[name][...] = value


# ---------------------------------------------------------------- tracking

def score_boxes(state: TrackerState, fmaps, boxes) -> np.ndarray:
    stride = _stride(state.backbone, state.config)
    return state.head.scores(state.head.encode(extract_rois(fmaps, boxes, state.config, stride)))


def select_box(proposals: np.ndarray, scores: np.ndarray, top_k: int) -> tuple[BBox, float]:
    """Mean of the ``top_k`` highest-scoring proposals and the best score.

    Ties are resolved towards the lower proposal index.
    """
    order = np.argsort(-np.asarray(scores), kind="stable")[:top_k]
    box = BBox.from_array(proposals[order].mean(axis=0))
    return box, float(scores[order[0]])


def track_frame(state: TrackerState, frame_tensor, event_tensor) -> tuple[BBox, float]:
    """Locate the target in the next frame and record training samples.

    The previous box moves to the result only when the score is positive;
    samples are collected only then as well.
    """
    if state is None or not isinstance(state, TrackerState):
        raise NotFittedError("tracker is not initialised; run init_first_frame first")
    cfg = state.config
    state.frame += 1
    fmaps = feature_maps(state.backbone, cfg, frame_tensor, event_tensor)
    stride = _stride(state.backbone, cfg)
    proposals = sample_proposals(state.prev_box, cfg.n_proposals, cfg.trans_sigma, cfg.scale_sigma,
                                 state.image_size, state.rng)
    scores = state.head.scores(state.head.encode(extract_rois(fmaps, proposals, cfg, stride)))
    box, score = select_box(proposals, scores, cfg.top_k)
    box = BBox.from_array(clip_boxes(box.as_array(), state.image_size)[0])
    state.last_score = score
    if score > 0:
        state.prev_box = box
        pos = _draw_positives(box, cfg.n_pos_update, cfg, state.image_size, state.rng, strict=False)
        neg = _draw_negatives(box, cfg.n_neg_update, cfg, state.image_size, state.rng, strict=False,
                              uniform_share=0.0)
        pos_enc = state.head.encode(extract_rois(fmaps, pos, cfg, stride)) if len(pos) else None
        neg_enc = state.head.encode(extract_rois(fmaps, neg, cfg, stride)) if len(neg) else None
        state.memory.add(state.frame, pos_enc, neg_enc)
    return box, score


def update_trigger(state: TrackerState) -> str | None:
    """``failure`` when the last score is <= 0, else ``periodic`` every N frames."""
    if state.last_score <= 0:
        return "failure"
    if state.frame > 0 and state.frame % state.config.update_interval == 0:
        return "periodic"
    return None


def online_update(state: TrackerState, trigger: str) -> TrackerState:
    """Retrain the head from memory.

    ``periodic`` uses every stored positive frame, ``failure`` only the last
    ``short_term`` frames; negatives always come from the short-term window.
    """
    if trigger not in ("periodic", "failure"):
        raise ValueError(f"unknown update trigger {trigger!r}")
    cfg = state.config
    last = None if trigger == "periodic" else cfg.short_term
    pos = state.memory.positives(last)
    neg = state.memory.negatives(cfg.short_term)
    train_head(state.head, pos, neg, cfg.update_iters, cfg, cfg.lr_update, state.rng)
    state.history.append((trigger, state.frame))
    return state


def step(state: TrackerState, frame_tensor, event_tensor) -> tuple[BBox, float]:
    box, score = track_frame(state, frame_tensor, event_tensor)
    trigger = update_trigger(state)
    if trigger:
        online_update(state, trigger)
    return box, score


def run_sequence(frame_tensors, event_tensors, init_box: BBox, config: TrackerConfig | None = None,
                 weights: dict | None = None, cmt_weights=None) -> tuple[list[BBox], list[float]]:
    """Track a whole sequence.

    The first entry is the given box, scored by the freshly trained head.
    """
    config = config or TrackerConfig()
    n = len(frame_tensors) if frame_tensors is not None else len(event_tensors)
    get = lambda seq, i: None if seq is None else seq[i]  # noqa: E731
    state = init_first_frame(get(frame_tensors, 0), get(event_tensors, 0), init_box, config,
                             weights=weights, cmt_weights=cmt_weights)
    fmaps = feature_maps(state.backbone, config, get(frame_tensors, 0), get(event_tensors, 0))
    boxes, scores = [state.prev_box], [float(score_boxes(state, fmaps, state.prev_box)[0])]
    for i in range(1, n):
        box, score = step(state, get(frame_tensors, i), get(event_tensors, i))
        boxes.append(box)
        scores.append(score)
        logger.debug("frame %d: %s score %.3f", i, box, score)
    return boxes, scores


# ---------------------------------------------------------------- estimator

class VisEventTracker(BaseEstimator):
    """Estimator wrapper: ``fit`` initialises on the first frame, ``predict`` tracks.

    ``X`` items are ``(frame_tensor, event_tensor)`` pairs; either may be
    None when the configured modality does not use it.
    """

    def __init__(self, fusion="cmt", modality="both", seed=0, image_scale=1, precision="float32",
                 config=None):
        self.fusion = fusion
        self.modality = modality
        self.seed = seed
        self.image_scale = image_scale
        self.precision = precision
        self.config = config

    def _config(self) -> TrackerConfig:
        base = dict(self.config or {})
        base.update(fusion=self.fusion, modality=self.modality, seed=self.seed,
                    image_scale=self.image_scale, precision=self.precision)
        return TrackerConfig.from_dict(base)

    def fit(self, X, y, weights=None):
        frame, event = X
        self.state_ = init_first_frame(frame, event, y, self._config(), weights=weights)
        return self

    def _check(self):
        if not hasattr(self, "state_"):
            raise NotFittedError("VisEventTracker is not fitted; call fit on the first frame")

    def predict(self, X) -> np.ndarray:
        """Boxes (N, 4) for a sequence of ``(frame, event)`` pairs; scores go to ``scores_``."""
        self._check()
        boxes, scores = [], []
        for frame, event in X:
            b, s = step(self.state_, frame, event)
            boxes.append(b.as_array())
            scores.append(s)
        self.scores_ = np.array(scores)
        return np.array(boxes).reshape(-1, 4)

    def score(self, X, y) -> float:
        """Mean IoU of ``predict(X)`` against boxes ``y``."""
        from ..boxes import iou_matrix
        pred = self.predict(X)
        gt = as_box_array(y)
        return float(np.mean([iou_matrix(p, g)[0, 0] for p, g in zip(pred, gt)]))
