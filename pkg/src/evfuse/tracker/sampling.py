"""Candidate box generation and labelling."""
from __future__ import annotations

import numpy as np

from ..boxes import BBox, as_box_array, clip_boxes, iou_matrix


class InsufficientSamplesError(RuntimeError):
    pass


def _check_image(image_size):
    width, height = image_size
    if not (width >= 1 and height >= 1):
        raise ValueError(f"degenerate image size {image_size}")


def sample_proposals(prev_box: BBox, n: int, trans_sigma: float, scale_sigma: float,
                     image_size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Gaussian proposals around ``prev_box`` as an (n, 4) array.

    Centres move by N(0, (trans_sigma * sqrt(w*h))^2) per axis; both sides
    scale by exp(N(0, scale_sigma^2)), preserving aspect ratio. Boxes are
    then clipped into the image.
    """
    _check_image(image_size)
    if n < 1:
        raise ValueError("n must be >= 1")
    b = as_box_array(prev_box)[0]
    cx, cy = b[0] + b[2] / 2, b[1] + b[3] / 2
    noise = rng.standard_normal((n, 3))
    spread = trans_sigma * np.sqrt(b[2] * b[3])
    s = np.exp(scale_sigma * noise[:, 2])
    w, h = b[2] * s, b[3] * s
    ncx = cx + spread * noise[:, 0]
    ncy = cy + spread * noise[:, 1]
    boxes = np.stack([ncx - w / 2, ncy - h / 2, w, h], axis=1)
    return clip_boxes(boxes, image_size)


def sample_uniform(ref_box: BBox, n: int, scale_sigma: float, image_size, rng) -> np.ndarray:
    """Boxes placed uniformly over the image, sized around ``ref_box``."""
    _check_image(image_size)
    width, height = image_size
    b = as_box_array(ref_box)[0]
    u = rng.random((n, 2))
    s = np.exp(scale_sigma * rng.standard_normal(n))
    w, h = np.minimum(b[2] * s, width), np.minimum(b[3] * s, height)
    boxes = np.stack([u[:, 0] * (width - w), u[:, 1] * (height - h), w, h], axis=1)
    return clip_boxes(boxes, image_size)


def label_samples(boxes, gt_box, pos_iou: float = 0.7, neg_iou: float = 0.3) -> np.ndarray:
    """1 for IoU >= pos_iou, 0 for IoU <= neg_iou, -1 (discard) otherwise."""
    ov = iou_matrix(boxes, gt_box)[:, 0]
    labels = np.full(len(ov), -1, dtype=np.int64)
    labels[ov >= pos_iou] = 1
    labels[ov <= neg_iou] = 0
    return labels


def collect_samples(draw, keep, n: int, max_rounds: int = 10, strict: bool = True) -> np.ndarray:
    """Draw batches of ``n`` candidates until ``n`` pass ``keep``.

    Gives up after ``max_rounds`` batches: raises when ``strict``,
    otherwise returns what was found.
    """
    found = []
    total = 0
    for _ in range(max_rounds):
        cand = draw(n)
        cand = cand[keep(cand)]
        found.append(cand)
        total += len(cand)
        if total >= n:
            break
    out = np.concatenate(found)[:n] if found else np.zeros((0, 4))
    if strict and len(out) < n:
        raise InsufficientSamplesError(f"only {len(out)} of {n} valid samples after {max_rounds} rounds")
    return out


def select_hard_negatives(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` highest scores; ties go to the lower index."""
    scores = np.asarray(scores)
    return np.argsort(-scores, kind="stable")[:k]
