"""Axis-aligned boxes ``(x, y, w, h)`` with top-left origin, in pixels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(np.isfinite(vals)):
            raise ValueError(f"box coordinates must be finite: {vals}")
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")
        for name, v in zip("xywh", vals):
            object.__setattr__(self, name, float(v))

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h])

    @classmethod
    def from_array(cls, a) -> "BBox":
        return cls(*(float(v) for v in a))


def as_box_array(boxes) -> np.ndarray:
    """Accepts a BBox, a sequence of BBoxes or an (N, 4) array."""
    if isinstance(boxes, BBox):
        return boxes.as_array()[None]
    if len(boxes) and isinstance(boxes[0], BBox):
        return np.array([b.as_array() for b in boxes])
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) box arrays."""
    a, b = as_box_array(a), as_box_array(b)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, 0][:, None], b[:, 0][None])
    ih = np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, 1][:, None], b[:, 1][None])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.clip(inter / union, 0.0, 1.0)


def clip_boxes(boxes: np.ndarray, image_size: tuple[int, int], min_size: float = 1.0) -> np.ndarray:
    """Shrink oversize boxes to the image and shift them inside it."""
    width, height = image_size
    out = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    out[:, 2] = np.clip(out[:, 2], min_size, width)
    out[:, 3] = np.clip(out[:, 3], min_size, height)
    out[:, 0] = np.clip(out[:, 0], 0, width - out[:, 2])
    out[:, 1] = np.clip(out[:, 1], 0, height - out[:, 3])
    return out
