"""Axis-aligned box helpers.

Boxes are ``(cx, cy, w, h)`` in pixel units, where pixel ``j`` spans
``[j, j + 1)``.  Functions accept a single box of shape ``(4,)`` or a stack
of shape ``(N, 4)`` and broadcast the usual numpy way.
"""
from typing import NamedTuple

import numpy as np


class Box(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_xywh(cls, x, y, w, h):
        """Build from the top-left ``x, y, w, h`` convention used by OTB."""
        return cls(x + w / 2.0, y + h / 2.0, float(w), float(h))

    def to_xywh(self):
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    @property
    def area(self):
        return self.w * self.h


def as_boxes(boxes):
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.shape[-1] != 4:
        raise ValueError(f"boxes must have a trailing dimension of 4, got {arr.shape}")
    return arr


def to_corners(boxes):
    b = as_boxes(boxes)
    half_w, half_h = b[..., 2] / 2.0, b[..., 3] / 2.0
    return np.stack([b[..., 0] - half_w, b[..., 1] - half_h,
                     b[..., 0] + half_w, b[..., 1] + half_h], axis=-1)


def from_corners(corners):
    c = np.asarray(corners, dtype=np.float64)
    w = c[..., 2] - c[..., 0]
    h = c[..., 3] - c[..., 1]
    return np.stack([c[..., 0] + w / 2.0, c[..., 1] + h / 2.0, w, h], axis=-1)


def xywh_to_center(xywh):
    a = np.asarray(xywh, dtype=np.float64)
    return np.stack([a[..., 0] + a[..., 2] / 2.0, a[..., 1] + a[..., 3] / 2.0,
                     a[..., 2], a[..., 3]], axis=-1)


def center_to_xywh(boxes):
    b = as_boxes(boxes)
    return np.stack([b[..., 0] - b[..., 2] / 2.0, b[..., 1] - b[..., 3] / 2.0,
                     b[..., 2], b[..., 3]], axis=-1)


def iou(a, b):
    """Intersection over union of two boxes (or broadcastable stacks).

    A zero-area union yields 0.
    """
    ca, cb = to_corners(a), to_corners(b)
    if np.any(as_boxes(a)[..., 2:] < 0) or np.any(as_boxes(b)[..., 2:] < 0):
        raise ValueError("box widths and heights must be non-negative")
    iw = np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0])
    ih = np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])
    area_b = (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1])
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def center_distance(a, b):
    a, b = as_boxes(a), as_boxes(b)
    d = np.hypot(a[..., 0] - b[..., 0], a[..., 1] - b[..., 1])
    return float(d) if np.ndim(d) == 0 else d


def clip_to_image(boxes, image_size):
    """Intersect boxes with the image rectangle ``(width, height)``."""
    width, height = image_size
    c = to_corners(boxes)
    c[..., 0] = np.clip(c[..., 0], 0, width)
    c[..., 2] = np.clip(c[..., 2], 0, width)
    c[..., 1] = np.clip(c[..., 1], 0, height)
    c[..., 3] = np.clip(c[..., 3], 0, height)
    return from_corners(c)


def intersects_image(boxes, image_size):
    width, height = image_size
    c = to_corners(boxes)
    return (c[..., 2] > 0) & (c[..., 0] < width) & (c[..., 3] > 0) & (c[..., 1] < height)
