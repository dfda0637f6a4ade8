"""Axis-aligned box arithmetic and greedy non-maximum suppression.

Coordinates are continuous pixels in corner form ``(x1, y1, x2, y2)``;
area is ``(x2 - x1) * (y2 - y1)`` with no +1 convention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise ValueError(f"non-finite box coordinate in {self!r}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {self!r}: need x2 > x1 and y2 > y1")

    @classmethod
    def from_seq(cls, xs: Sequence[float]) -> "Box":
        if len(xs) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(xs)}")
        return cls(float(xs[0]), float(xs[1]), float(xs[2]), float(xs[3]))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def shifted(self, dx: float, dy: float) -> "Box":
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def scaled(self, s: float) -> "Box":
        return Box(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)

    def inside(self, width: float, height: float) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height


def area(b: Box) -> float:
    return b.area


def intersection(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two valid boxes, in [0, 1]."""
    inter = intersection(a, b)
    return inter / (a.area + b.area - inter)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([b.to_list() for b in boxes], dtype=np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``[N, 4]`` and ``[M, 4]`` corner arrays.

    Uses the same arithmetic order as :func:`iou` so results agree bitwise.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def nms(dets: Sequence[tuple[Box, float]], threshold: float) -> list[int]:
    """Greedy NMS over ``(box, score)`` pairs.

    Returns indices of kept detections in descending-score order. Equal
    scores are broken by the lower original index. A box is kept iff its
    IoU with every already-kept box is ``<= threshold``.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"nms threshold must be in [0, 1], got {threshold}")
    n = len(dets)
    if n == 0:
        return []
    scores = np.array([s for _, s in dets], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms scores must be finite")
    arr = boxes_to_array([b for b, _ in dets])
    # lexsort: last key is primary
    order = np.lexsort((np.arange(n), -scores))
    overlaps = iou_matrix(arr, arr)
    keep: list[int] = []
    for i in order:
        if all(overlaps[i, k] <= threshold for k in keep):
            keep.append(int(i))
    return keep
