"""Dense multi-level anchor grids, ground-truth matching, and box delta coding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .geometry import BBox, boxes_to_array, iou_matrix

__all__ = [
    "AnchorSpec",
    "LevelAnchors",
    "AnchorGrid",
    "MatchAssignment",
    "POSITIVE",
    "NEGATIVE",
    "IGNORED",
    "generate_anchors",
    "match_anchors",
    "encode_box",
    "decode_box",
    "encode_boxes",
    "decode_boxes",
]

# Per-anchor match states.
POSITIVE = 1
NEGATIVE = 0
IGNORED = -1

# Octave scales 2^(k/5) for k = 0..4.
DEFAULT_OCTAVES = tuple(2.0 ** (k / 5.0) for k in range(5))


@dataclass(frozen=True)
class AnchorSpec:
    """Anchor layout: pyramid levels, shapes per location, and a global size multiplier.

    Level ``l`` uses stride ``2**l`` and base anchor side ``2**(l + 2)`` pixels
    (32 px at level 3 up to 512 px at level 7). ``global_scale`` multiplies the
    anchor side length and is the tunable anchor-size knob.
    """

    levels: tuple[int, ...] = (3, 4, 5)
    aspect_ratios: tuple[float, ...] = (0.5, 0.75, 1.0, 1.25, 1.5)
    octave_scales: tuple[float, ...] = DEFAULT_OCTAVES
    global_scale: float = 2.0

    def __post_init__(self) -> None:
        if not self.levels:
            raise ValueError("anchor spec needs at least one pyramid level")
        if any(r <= 0 for r in self.aspect_ratios):
            raise ValueError(f"aspect ratios must be positive: {self.aspect_ratios}")
        if any(s <= 0 for s in self.octave_scales):
            raise ValueError(f"octave scales must be positive: {self.octave_scales}")
        if self.global_scale <= 0:
            raise ValueError(f"global scale must be positive: {self.global_scale}")

    @property
    def anchors_per_location(self) -> int:
        return len(self.aspect_ratios) * len(self.octave_scales)

    @staticmethod
    def base_size(level: int) -> float:
        """Base anchor side length (pixels) for a pyramid level: 2**(level + 2)."""
        return float(2 ** (level + 2))


@dataclass(frozen=True)
class LevelAnchors:
    """All anchors of one pyramid level, flattened in (y, x, anchor) order."""

    level: int
    stride: int
    grid_h: int
    grid_w: int
    boxes: np.ndarray  # (grid_h * grid_w * A, 4) float64 corner coordinates

    @property
    def count(self) -> int:
        return self.boxes.shape[0]


@dataclass(frozen=True)
class AnchorGrid:
    """Anchor boxes for every configured level at a fixed square input size."""

    spec: AnchorSpec
    input_size: int
    levels: tuple[LevelAnchors, ...]

    @cached_property
    def all_boxes(self) -> np.ndarray:
        """Concatenation of all level anchors, coarse levels last."""
        if not self.levels:
            return np.zeros((0, 4), dtype=np.float64)
        return np.concatenate([lv.boxes for lv in self.levels], axis=0)

    @property
    def total(self) -> int:
        return sum(lv.count for lv in self.levels)

    def level_counts(self) -> tuple[int, ...]:
        return tuple(lv.count for lv in self.levels)


def _anchor_shapes(spec: AnchorSpec, level: int) -> np.ndarray:
    """(A, 2) array of (width, height) for one level, ratio-major order."""
    shapes = []
    for ratio in spec.aspect_ratios:
        for octave in spec.octave_scales:
            side = AnchorSpec.base_size(level) * octave * spec.global_scale
            anchor_area = side * side
            w = math.sqrt(anchor_area * ratio)
            h = math.sqrt(anchor_area / ratio)
            shapes.append((w, h))
    return np.asarray(shapes, dtype=np.float64)


def generate_anchors(spec: AnchorSpec, input_size: int) -> AnchorGrid:
    """Lay anchors on a stride-spaced lattice (offset stride/2) for each level.

    Anchors are kept unclipped; they may extend beyond the image bounds.
    """
    if input_size <= 0:
        raise ValueError(f"input size must be positive: {input_size}")
    level_anchors = []
    for level in spec.levels:
        stride = 2 ** level
        grid_w = grid_h = input_size // stride
        shapes = _anchor_shapes(spec, level)  # (A, 2)
        cx = (np.arange(grid_w, dtype=np.float64) + 0.5) * stride
        cy = (np.arange(grid_h, dtype=np.float64) + 0.5) * stride
        cxg, cyg = np.meshgrid(cx, cy)  # (grid_h, grid_w), rows indexed by y
        centers = np.stack([cxg, cyg], axis=-1).reshape(-1, 1, 2)
        half = 0.5 * shapes.reshape(1, -1, 2)
        boxes = np.concatenate([centers - half, centers + half], axis=-1)
        level_anchors.append(
            LevelAnchors(level, stride, grid_h, grid_w, boxes.reshape(-1, 4))
        )
    return AnchorGrid(spec, input_size, tuple(level_anchors))


@dataclass(frozen=True)
class MatchAssignment:
    """Per-anchor match state against one image's ground truth."""

    states: np.ndarray  # (N,) int8 in {POSITIVE, NEGATIVE, IGNORED}
    gt_index: np.ndarray  # (N,) int64, matched GT index for positives, else -1
    box_targets: np.ndarray  # (N, 4) float64, encoded deltas for positives, else 0

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.states == POSITIVE))


def match_anchors(
    grid: AnchorGrid,
    gt: Sequence[BBox] | np.ndarray,
    pos_thresh: float = 0.5,
    neg_thresh: float = 0.4,
) -> MatchAssignment:
    """Assign anchors to ground truth by IoU thresholds.

    An anchor is positive to its highest-IoU GT when that IoU >= ``pos_thresh``,
    negative when its best IoU < ``neg_thresh``, and ignored in between. Each
    GT additionally forces its single best-IoU anchor positive (provided the
    IoU is nonzero), so no GT with any overlap goes unmatched.
    """
    if pos_thresh < neg_thresh:
        raise ValueError(f"pos_thresh {pos_thresh} < neg_thresh {neg_thresh}")
    gt_arr = gt if isinstance(gt, np.ndarray) else boxes_to_array(gt)
    gt_arr = np.asarray(gt_arr, dtype=np.float64).reshape(-1, 4)
    anchors = grid.all_boxes
    n = anchors.shape[0]
    states = np.full(n, NEGATIVE, dtype=np.int8)
    gt_index = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4), dtype=np.float64)
    if gt_arr.shape[0] == 0:
        return MatchAssignment(states, gt_index, targets)

    ious = iou_matrix(anchors, gt_arr)  # (N, M)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]

    states[best_iou >= pos_thresh] = POSITIVE
    ignored = (best_iou >= neg_thresh) & (best_iou < pos_thresh)
    states[ignored] = IGNORED
    gt_index[states == POSITIVE] = best_gt[states == POSITIVE]

    # Force each GT's best anchor positive; later GTs win contested anchors.
    for j in range(gt_arr.shape[0]):
        i = int(ious[:, j].argmax())
        if ious[i, j] > 0.0:
            states[i] = POSITIVE
            gt_index[i] = j

    pos = states == POSITIVE
    if pos.any():
        targets[pos] = encode_boxes(anchors[pos], gt_arr[gt_index[pos]])
    return MatchAssignment(states, gt_index, targets)


def _corners_to_cwh(boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    cx = boxes[..., 0] + 0.5 * w
    cy = boxes[..., 1] + 0.5 * h
    return cx, cy, w, h


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Center/log-size deltas mapping each anchor onto its ground-truth box."""
    anchors = np.asarray(anchors, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    acx, acy, aw, ah = _corners_to_cwh(anchors)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchors must have positive width and height")
    gcx, gcy, gw, gh = _corners_to_cwh(gts)
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("ground-truth boxes must have positive width and height")
    return np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)],
        axis=-1,
    )


def decode_boxes(
    anchors: np.ndarray, deltas: np.ndarray, max_log_size: float | None = None
) -> np.ndarray:
    """Invert :func:`encode_boxes`; optionally clamp log-size deltas for stability."""
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    acx, acy, aw, ah = _corners_to_cwh(anchors)
    dx, dy, dw, dh = deltas[..., 0], deltas[..., 1], deltas[..., 2], deltas[..., 3]
    if max_log_size is not None:
        dw = np.clip(dw, -max_log_size, max_log_size)
        dh = np.clip(dh, -max_log_size, max_log_size)
    cx = acx + dx * aw
    cy = acy + dy * ah
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def encode_box(anchor: BBox, gt: BBox) -> np.ndarray:
    """Single-box convenience wrapper around :func:`encode_boxes`."""
    return encode_boxes(anchor.as_array(), gt.as_array())


def decode_box(anchor: BBox, delta: np.ndarray) -> BBox:
    """Exact inverse of :func:`encode_box`."""
    c = decode_boxes(anchor.as_array(), np.asarray(delta, dtype=np.float64))
    return BBox(float(c[0]), float(c[1]), float(c[2]), float(c[3]))
