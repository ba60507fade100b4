"""Axis-aligned box arithmetic in continuous pixel coordinates.

Boxes are ``(x1, y1, x2, y2)`` with ``(x1, y1)`` the top-left corner. Nothing
here rounds to the pixel grid; snapping happens only where pixels are read
(patch extraction, RoI pooling).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import GeometryError


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"non-finite box coordinates {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise GeometryError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


def area(b: BoundingBox) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union. Boxes touching only along an edge give 0."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = area(a) + area(b) - inter
    return inter / union


def split_vertical(b: BoundingBox) -> tuple[BoundingBox, BoundingBox]:
    """Bisect ``b`` at its horizontal center into left and right halves."""
    x_cen = b.x1 + (b.x2 - b.x1) / 2
    return BoundingBox(b.x1, b.y1, x_cen, b.y2), BoundingBox(x_cen, b.y1, b.x2, b.y2)


def clip_to_image(b: BoundingBox, w: float, h: float) -> Optional[BoundingBox]:
    """Intersect ``b`` with the image rectangle ``(0, 0, w, h)``.

    Returns None when nothing of the box lies inside the image.
    """
    if w <= 0 or h <= 0:
        raise GeometryError(f"image size must be positive, got {w}x{h}")
    x1, y1 = max(b.x1, 0.0), max(b.y1, 0.0)
    x2, y2 = min(b.x2, float(w)), min(b.y2, float(h))
    if x1 >= x2 or y1 >= y2:
        return None
    return BoundingBox(x1, y1, x2, y2)


# Array forms. Operation order mirrors the scalar functions above so both paths
# give bit-identical results for the same pair of boxes.

def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def areas_array(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    overlap = (iw > 0.0) & (ih > 0.0)
    inter = np.where(overlap, iw * ih, 0.0)
    union = areas_array(a)[:, None] + areas_array(b)[None, :] - inter
    return np.where(overlap, inter / np.where(overlap, union, 1.0), 0.0)
