"""RoI align with one bilinear sample at the centre of each output bin."""
from __future__ import annotations

import numpy as np

from ..boxes import BBox, as_box_array


def _sample_grid(boxes, fmap_shape, stride, output_size):
    h, w = fmap_shape
    oh, ow = output_size
    # feature index i sits at image coordinate (i + 0.5) * stride
    fx = boxes[:, 0] / stride - 0.5
    fy = boxes[:, 1] / stride - 0.5
    fw = boxes[:, 2] / stride
    fh = boxes[:, 3] / stride
    outside = (fx + fw <= -0.5) | (fx >= w - 0.5) | (fy + fh <= -0.5) | (fy >= h - 0.5)
    if np.any(outside):
        bad = int(np.flatnonzero(outside)[0])
        raise ValueError(f"box {boxes[bad].tolist()} lies entirely outside the feature map")
    sx = fx[:, None] + (np.arange(ow) + 0.5)[None] * fw[:, None] / ow  # (N, ow)
    sy = fy[:, None] + (np.arange(oh) + 0.5)[None] * fh[:, None] / oh  # (N, oh)
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.minimum(np.floor(sx).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(sy).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    lx, ly = sx - x0, sy - y0
    return x0, x1, y0, y1, lx, ly


def roi_align(feature_map, boxes, stride: int, output_size=(3, 3)) -> np.ndarray:
    """Pool (C, H, W) features inside image-space boxes -> (N, C, oh, ow).

    A single BBox input gives a (C, oh, ow) result.
    """
    fmap = np.asarray(feature_map)
    single = isinstance(boxes, BBox)
    b = as_box_array(boxes)
    x0, x1, y0, y1, lx, ly = _sample_grid(b, fmap.shape[1:], stride, output_size)
    yy0, yy1 = y0[:, :, None], y1[:, :, None]
    xx0, xx1 = x0[:, None, :], x1[:, None, :]
    wy, wx = ly[:, :, None], lx[:, None, :]
    dt = fmap.dtype
    out = (fmap[:, yy0, xx0] * ((1 - wy) * (1 - wx)).astype(dt)
           + fmap[:, yy0, xx1] * ((1 - wy) * wx).astype(dt)
           + fmap[:, yy1, xx0] * (wy * (1 - wx)).astype(dt)
           + fmap[:, yy1, xx1] * (wy * wx).astype(dt))  # (C, N, oh, ow)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    return out[0] if single else out


def roi_align_backward(dout, fmap_shape, boxes, stride: int, output_size=(3, 3)) -> np.ndarray:
    """Gradient w.r.t. the (C, H, W) feature map."""
    b = as_box_array(boxes)
    dout = np.asarray(dout).reshape((len(b), fmap_shape[0]) + tuple(output_size))
    x0, x1, y0, y1, lx, ly = _sample_grid(b, fmap_shape[1:], stride, output_size)
    grad = np.zeros(fmap_shape, dtype=np.float64)
    d = dout.transpose(1, 0, 2, 3)  # (C, N, oh, ow)
    n, oh, ow = len(b), output_size[0], output_size[1]
    shape = (n, oh, ow)
    yy0 = np.broadcast_to(y0[:, :, None], shape)
    yy1 = np.broadcast_to(y1[:, :, None], shape)
    xx0 = np.broadcast_to(x0[:, None, :], shape)
    xx1 = np.broadcast_to(x1[:, None, :], shape)
    wy, wx = ly[:, :, None], lx[:, None, :]
    c, hw = fmap_shape[0], fmap_shape[1] * fmap_shape[2]
    offsets = (np.arange(c) * hw)[:, None]
    for ys, xs, wgt in ((yy0, xx0, (1 - wy) * (1 - wx)), (yy0, xx1, (1 - wy) * wx),
                        (yy1, xx0, wy * (1 - wx)), (yy1, xx1, wy * wx)):
        flat = (ys * fmap_shape[2] + xs).reshape(1, -1)
        contrib = (d * wgt[None]).reshape(c, -1)
        grad += np.bincount((offsets + flat).ravel(), weights=contrib.ravel(),
                            minlength=c * hw).reshape(fmap_shape)
    return grad
