"""Axis-aligned box math: center-form boxes, IoU/GIoU, and the
logit-space anchor-plus-offset parameterization used by the decoder heads.

All coordinates are fractions of the image extent. Corners derived from a
box may fall outside [0, 1]; they are never clamped here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOGIT_EPS = 1e-5


@dataclass(frozen=True)
class BoundingBox:
    """Center-form box: (cx, cy) in [0, 1], (w, h) in (0, 1]."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center out of range: ({self.cx}, {self.cy})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size out of range: ({self.w}, {self.h})")

    def corners(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2); may extend past the image."""
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @staticmethod
    def from_corners(x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return BoundingBox((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class BoxOffset:
    """Unconstrained logit-space deltas applied to an anchor."""

    dx: float = 0.0
    dy: float = 0.0
    dw: float = 0.0
    dh: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Rectangle IoU on corner form; 0 when the union has zero area."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """IoU minus (hull - union)/hull; equals IoU when the hull is the union."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area() + b.area() - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    if union <= 0.0 or hull <= 0.0:
        return 0.0
    return inter / union - (hull - union) / hull


def iou_matrix(a: list[BoundingBox] | np.ndarray, b: list[BoundingBox] | np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b)). Accepts (N, 4) center-form arrays."""
    xa = boxes_to_array(a)
    xb = boxes_to_array(b)
    if xa.shape[0] == 0 or xb.shape[0] == 0:
        return np.zeros((xa.shape[0], xb.shape[0]))
    ca = _corner_form(xa)
    cb = _corner_form(xb)
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = xa[:, 2] * xa[:, 3]
    area_b = xb[:, 2] * xb[:, 3]
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def boxes_to_array(boxes: list[BoundingBox] | np.ndarray) -> np.ndarray:
    """(N, 4) center-form float64 array."""
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64)
    if not boxes:
        return np.zeros((0, 4))
    return np.stack([b.as_array() for b in boxes])


def array_to_boxes(arr: np.ndarray) -> list[BoundingBox]:
    return [BoundingBox(*map(float, row)) for row in arr.reshape(-1, 4)]


def _corner_form(centers: np.ndarray) -> np.ndarray:
    half = centers[:, 2:] / 2.0
    return np.concatenate([centers[:, :2] - half, centers[:, :2] + half], axis=1)


def squash(x: float) -> float:
    """Logistic function, the total map from offset space to (0, 1)."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def unsquash(p: float, eps: float = LOGIT_EPS) -> float:
    """Inverse logistic with inputs clamped to [eps, 1 - eps]."""
    p = min(max(p, eps), 1.0 - eps)
    return math.log(p / (1.0 - p))


def apply_offset(anchor: BoundingBox, delta: BoxOffset) -> BoundingBox:
    """Move an anchor by logit-space deltas; total over all real deltas."""
    return BoundingBox(
        squash(unsquash(anchor.cx) + delta.dx),
        squash(unsquash(anchor.cy) + delta.dy),
        squash(unsquash(anchor.w) + delta.dw),
        squash(unsquash(anchor.h) + delta.dh),
    )


def apply_offset_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized apply_offset on (N, 4) arrays."""
    p = np.clip(anchors, LOGIT_EPS, 1.0 - LOGIT_EPS)
    logits = np.log(p / (1.0 - p)) + deltas
    return 1.0 / (1.0 + np.exp(-logits))
