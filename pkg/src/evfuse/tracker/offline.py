"""Offline multi-domain training over several annotated sequences.

Every sequence gets its own two-way fc6 head (a "domain"); the shared
layers learn from all of them. Each step draws one frame of one
sequence, applies the binary loss on that sequence's head and an
instance-embedding loss that makes the target's positive score highest
on its own head. The exported weights exclude fc6, so online tracking
starts from a fresh single-domain head.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..boxes import BBox
from ..nn import functional as F
from .core import (TrackerConfig, _draw_negatives, _draw_positives, _stride, build_backbone, extract_rois,
                   normalize_frame, _upsample)
from .head import TrackerHead, positive_score
from .roi import roi_align_backward

logger = logging.getLogger(__name__)


@dataclass
class TrainingSequence:
    frames: list  # (3, H, W) tensors, or None for event-only
    events: list  # (3, H, W) tensors, or None for frame-only
    boxes: list  # BBox per frame (None = absent)


def _branch_inputs(config: TrackerConfig, frame, event) -> list:
    dt = config.dtype
    f = None if frame is None else normalize_frame(_upsample(np.asarray(frame, dt), config.image_scale), config)
    e = None if event is None else _upsample(np.asarray(event, dt), config.image_scale)
    if config.modality == "frame":
        return [f]
    if config.modality == "event":
        return [e]
    if config.fusion.startswith("early."):
        raise ValueError("offline training supports feature- and score-level fusion only")
    return [f, e]


def train_offline(sequences: list[TrainingSequence], config: TrackerConfig | None = None, iters: int = 100,
                  lr: float = 1e-4, iel_weight: float = 0.1, train_backbone: bool = False,
                  n_pos: int = 32, n_neg: int = 96) -> dict:
    """Train shared layers; returns a flat weight dict (``backbone.*``, ``fusion.*``, ``clf{i}.*``)."""
    config = config or TrackerConfig()
    if not sequences:
        raise ValueError("need at least one training sequence")
    rng = np.random.default_rng(config.seed)
    backbone = build_backbone(config)
    n_dom = len(sequences)
    probe = _branch_inputs(config, sequences[0].frames and sequences[0].frames[0],
                           sequences[0].events and sequences[0].events[0])
    channels = backbone(probe[0]).shape[0]
    head = TrackerHead(config.fusion, config.modality, channels, config.roi_size ** 2, config.seed,
                       train_fusion=True, dtype=config.dtype, n_domains=n_dom)
    stride = _stride(backbone, config)

    params = dict(head.params)
    if train_backbone:
        params.update({f"backbone.{k}": v for k, v in backbone.params.items()})
    opt = F.SGD(params, lr, config.momentum, config.weight_decay)

    for it in range(iters):
        d = it % n_dom
        seq = sequences[d]
        valid = [i for i, b in enumerate(seq.boxes) if b is not None]
        i = valid[int(rng.integers(len(valid)))]
        box = seq.boxes[i] if isinstance(seq.boxes[i], BBox) else BBox.from_array(seq.boxes[i])
        ref = seq.frames[i] if seq.frames is not None else seq.events[i]
        size = (ref.shape[-1], ref.shape[-2])
        pos = _draw_positives(box, n_pos, config, size, rng, strict=False)
        neg = _draw_negatives(box, n_neg, config, size, rng, strict=False)
        if not len(pos) or not len(neg):
            continue
        boxes = np.concatenate([pos, neg])
        labels = np.concatenate([np.ones(len(pos), np.int64), np.zeros(len(neg), np.int64)])

        inputs = _branch_inputs(config, None if seq.frames is None else seq.frames[i],
                                None if seq.events is None else seq.events[i])
        fmaps, caches = [], []
        for x in inputs:
            fmaps.append(backbone.forward(x, keep_cache=train_backbone))
            caches.append(backbone._cache)
        rois = extract_rois(fmaps, boxes, config, stride)
        logits = head.logits(head.encode(rois), domain=None, keep_cache=True)  # (N, D, 2)

        bce, g_own = F.bce_loss(logits[:, d].astype(np.float64), labels)
        scores = positive_score(logits[:len(pos)]).astype(np.float64)  # (P, D)
        iel, g_iel = F.instance_embedding_loss(scores, d)
        dlogits = np.zeros(logits.shape, dtype=np.float64)
        dlogits[:, d] = g_own
        dlogits[:len(pos), :, 1] += iel_weight * g_iel
        dlogits[:len(pos), :, 0] -= iel_weight * g_iel
        grads = head.backward(dlogits.astype(config.dtype))

        if train_backbone:
            drois = head.input_grad
            total = {}
            for b, (fm, cache) in enumerate(zip(fmaps, caches)):
                dfm = roi_align_backward(drois[:, b].reshape(len(boxes), channels, config.roi_size, config.roi_size),
                                         fm.shape, boxes, stride, (config.roi_size, config.roi_size))
                backbone._cache = cache
                _, g = backbone.backward(dfm.astype(config.dtype))
                for k, v in g.items():
                    total[k] = total.get(k, 0) + v
            grads.update({f"backbone.{k}": v for k, v in total.items()})
        opt.step(grads)
        if it % 10 == 0:
            logger.info("offline iter %d domain %d: bce %.4f iel %.4f", it, d, bce, iel)

    out = {f"backbone.{k}": v for k, v in backbone.params.items()}
    out.update({k: v for k, v in head.all_params().items() if ".fc6." not in k})
    return out
