"""Axis-aligned box arithmetic: IoU, clipping, and non-maximum suppression.

All coordinates are normalized to [0, 1] with x rightward and y downward;
boxes are (top-left, bottom-right) corner pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidGeometryError

__all__ = ["BBox", "Detection", "iou", "clip_to_unit", "nms"]


@dataclass(frozen=True)
class BBox:
    """Corner-form box. Valid boxes have x1 <= x2, y1 <= y2, coords in [0, 1]."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return max(0.0, self.x2 - self.x1)

    @property
    def height(self) -> float:
        return max(0.0, self.y2 - self.y1)

    def area(self) -> float:
        return self.width * self.height

    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def is_valid(self) -> bool:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            return False
        return (
            self.x1 <= self.x2
            and self.y1 <= self.y2
            and all(0.0 <= c <= 1.0 for c in coords)
        )


@dataclass(frozen=True)
class Detection:
    """A scored, classified box: the currency between every module."""

    box: BBox
    confidence: float
    class_id: int


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def clip_to_unit(b: BBox) -> BBox:
    """Clamp coordinates to [0, 1] and restore corner ordering by swapping."""
    coords = (b.x1, b.y1, b.x2, b.y2)
    if not all(math.isfinite(c) for c in coords):
        raise InvalidGeometryError(f"non-finite box coordinates: {coords}")
    x1, x2 = sorted((min(max(b.x1, 0.0), 1.0), min(max(b.x2, 0.0), 1.0)))
    y1, y2 = sorted((min(max(b.y1, 0.0), 1.0), min(max(b.y2, 0.0), 1.0)))
    return BBox(x1, y1, x2, y2)


def _order_key(d: Detection) -> tuple:
    # Deterministic: confidence desc, then class id, then box coordinates.
    return (-d.confidence, d.class_id, d.box.x1, d.box.y1, d.box.x2, d.box.y2)


def nms(
    dets: list[Detection], iou_threshold: float, class_aware: bool = True
) -> list[Detection]:
    """Greedy non-maximum suppression in descending confidence order.

    A detection is dropped when its IoU with an already-kept detection
    exceeds ``iou_threshold`` (and, if ``class_aware``, the two share a
    class id). Output is sorted by the same deterministic order used for
    suppression.
    """
    kept: list[Detection] = []
    for d in sorted(dets, key=_order_key):
        suppressed = False
        for k in kept:
            if class_aware and k.class_id != d.class_id:
                continue
            if iou(k.box, d.box) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(d)
    return kept
