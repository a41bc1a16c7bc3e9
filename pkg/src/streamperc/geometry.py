"""Axis-aligned boxes with IoU and score-ordered greedy matching.

Boxes are stored corner-wise (x1, y1, x2, y2) in continuous pixel
coordinates. Center-size conversion happens at module boundaries, e.g. in
the Kalman state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class InvalidInputError(ValueError):
    """Raised when a box or detection violates its invariants."""


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidInputError(f"non-finite box coordinates: {coords}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise InvalidInputError(f"box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_xywh(self) -> list[float]:
        return [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]

    def to_cxcywh(self) -> np.ndarray:
        return np.array([
            (self.x1 + self.x2) / 2.0,
            (self.y1 + self.y2) / 2.0,
            self.x2 - self.x1,
            self.y2 - self.y1,
        ])

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        if w < 0 or h < 0:
            raise InvalidInputError(f"negative box size: w={w}, h={h}")
        return cls(x, y, x + w, y + h)

    @classmethod
    def from_cxcywh(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        if w < 0 or h < 0:
            raise InvalidInputError(f"negative box size: w={w}, h={h}")
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


@dataclass(frozen=True)
class Detection:
    box: BBox
    category: int
    score: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise InvalidInputError(f"score must lie in [0, 1], got {self.score}")
        if self.category < 0:
            raise InvalidInputError(f"category must be non-negative, got {self.category}")


@dataclass(frozen=True)
class GroundTruthBox:
    box: BBox
    category: int
    track_id: Optional[int] = None

    def __post_init__(self):
        if self.category < 0:
            raise InvalidInputError(f"category must be non-negative, got {self.category}")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def _as_array(boxes: Sequence[BBox]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([b.as_tuple() for b in boxes], dtype=float)


def iou_matrix(A: Sequence[BBox], B: Sequence[BBox]) -> np.ndarray:
    """Pairwise IoU, shape ``(len(A), len(B))``."""
    a = _as_array(A)
    b = _as_array(B)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.minimum(out, 1.0)


def greedy_match(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                 thresh: float) -> list[tuple[int, int]]:
    """Match detections to ground truth greedily by descending score.

    Each detection, in score order (ties by input index), claims the
    unmatched ground truth of its own category with the highest IoU, provided
    that IoU is at least ``thresh``. Ties in IoU go to the lower gt index.
    """
    if not 0.0 < thresh <= 1.0:
        raise ValueError(f"thresh must lie in (0, 1], got {thresh}")
    if not dets or not gts:
        return []
    ious = iou_matrix([d.box for d in dets], [g.box for g in gts])
    gt_cats = np.array([g.category for g in gts])
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = np.zeros(len(gts), dtype=bool)
    pairs = []
    for di in order:
        cand = np.where((gt_cats == dets[di].category) & ~taken, ious[di], -1.0)
        gi = int(np.argmax(cand))
        if cand[gi] >= thresh:
            taken[gi] = True
            pairs.append((di, gi))
    return pairs
