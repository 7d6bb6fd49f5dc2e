"""Axis-aligned bounding boxes, IoU, and non-maximum suppression.

Coordinates are continuous corner coordinates in the image frame
(origin top-left, x right, y down); width is exactly ``x_max - x_min``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

__all__ = [
    "BBox",
    "iou",
    "area",
    "aspect_ratio",
    "nms",
    "iou_matrix",
    "boxes_to_array",
]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned rectangle with optional class label and confidence score."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    label: str | int | None = None
    score: float | None = None

    def __post_init__(self) -> None:
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(
                f"degenerate corners: ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score outside [0, 1]: {self.score}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    def with_score(self, score: float) -> "BBox":
        return replace(self, score=score)

    def clip(self, width: float, height: float) -> "BBox":
        """Clip corners to the rectangle [0, width] x [0, height]."""
        return replace(
            self,
            x_min=min(max(self.x_min, 0.0), width),
            y_min=min(max(self.y_min, 0.0), height),
            x_max=min(max(self.x_max, 0.0), width),
            y_max=min(max(self.y_max, 0.0), height),
        )


def area(b: BBox) -> float:
    """Box area in squared pixels."""
    return b.width * b.height


def aspect_ratio(b: BBox) -> float:
    """Width divided by height. Raises on zero-height boxes."""
    if b.height == 0:
        raise ValueError(f"aspect ratio undefined for zero-height box: {b}")
    return b.width / b.height


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when the union has zero area."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def nms(detections: Sequence[BBox], iou_threshold: float) -> list[BBox]:
    """Greedy non-maximum suppression.

    Keeps the highest-scored box and drops remaining boxes of the same label
    whose IoU with a kept box exceeds ``iou_threshold``. Ties on equal score
    are broken by input order. Output is sorted by descending score.
    """
    for d in detections:
        if d.score is None:
            raise ValueError(f"nms requires scored boxes, got {d}")
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    kept: list[BBox] = []
    for i in order:
        cand = detections[i]
        suppressed = any(
            k.label == cand.label and iou(k, cand) > iou_threshold for k in kept
        )
        if not suppressed:
            kept.append(cand)
    return kept


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    """Stack boxes into an (N, 4) float64 array of corners."""
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack([b.as_array() for b in boxes])


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two corner-coordinate arrays, shape (N, M)."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix_min = np.maximum(a[:, None, 0], b[None, :, 0])
    iy_min = np.maximum(a[:, None, 1], b[None, :, 1])
    ix_max = np.minimum(a[:, None, 2], b[None, :, 2])
    iy_max = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.clip(ix_max - ix_min, 0.0, None)
    ih = np.clip(iy_max - iy_min, 0.0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    safe = np.where(union > 0.0, union, 1.0)
    return np.where(union > 0.0, inter / safe, 0.0)
