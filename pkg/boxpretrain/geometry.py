"""Box geometry shared by every stage of the pipeline.

Boxes are center-format (``cx, cy, w, h``) in pixels. Corner format
(``x0, y0, x1, y1``) only appears at serialization boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

BACKGROUND = 0
IGNORE = -1

# Largest log-ratio accepted when decoding predicted deltas.
MAX_LOG_RATIO = math.log(1000.0 / 16.0)


class GeometryError(RuntimeError):
    """Base error for box geometry issues."""


class EmptyBoxError(GeometryError):
    """Raised when clipping leaves a box with no area inside the image."""


@dataclass(slots=True, frozen=True)
class BBox:
    """Axis-aligned box in center format."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        values = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in values):
            raise GeometryError(f"Box fields must be finite: {values}")
        if self.w <= 0 or self.h <= 0:
            raise GeometryError(f"Box must have positive extent: w={self.w} h={self.h}")

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    def corners(self) -> tuple[float, float, float, float]:
        half_w = self.w / 2.0
        half_h = self.h / 2.0
        return (self.cx - half_w, self.cy - half_h, self.cx + half_w, self.cy + half_h)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(slots=True, frozen=True)
class LabeledBox:
    """A box carrying its assignment index (``BACKGROUND`` or 1..n)."""

    box: BBox
    label: int = BACKGROUND


@dataclass(slots=True, frozen=True)
class ScoredBox:
    box: BBox
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise GeometryError(f"Score must lie in [0, 1], got {self.score}")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two valid boxes."""

    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    inter_w = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    inter_h = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = inter_w * inter_h
    return inter / (a.area + b.area - inter)


def nms(boxes: Sequence[ScoredBox], iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Returns kept indices ordered by descending score. Equal scores keep the
    lower input index first. A box is suppressed when its IoU with an already
    kept box exceeds ``iou_threshold``.
    """

    if not 0.0 < iou_threshold <= 1.0:
        raise GeometryError(f"NMS threshold must lie in (0, 1], got {iou_threshold}")
    if not boxes:
        return []
    arr = boxes_to_array([item.box for item in boxes])
    scores = np.array([item.score for item in boxes], dtype=np.float64)
    return nms_array(arr, scores, iou_threshold)


def nms_array(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Array flavour of :func:`nms` for ``(N, 4)`` center-format boxes."""

    if len(boxes) == 0:
        return []
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep: list[int] = []
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        suppressed |= overlaps[idx] > iou_threshold
    return keep


def encode_deltas(anchor: BBox, target: BBox) -> tuple[float, float, float, float]:
    return (
        (target.cx - anchor.cx) / anchor.w,
        (target.cy - anchor.cy) / anchor.h,
        math.log(target.w / anchor.w),
        math.log(target.h / anchor.h),
    )


def decode_deltas(anchor: BBox, deltas: Sequence[float]) -> BBox:
    dx, dy, dw, dh = deltas
    return BBox(
        anchor.cx + dx * anchor.w,
        anchor.cy + dy * anchor.h,
        anchor.w * math.exp(dw),
        anchor.h * math.exp(dh),
    )


def clip_to_image(box: BBox, width: float, height: float) -> BBox:
    """Clamp ``box`` to ``[0, width] x [0, height]``."""

    if width <= 0 or height <= 0:
        raise GeometryError(f"Image extent must be positive: {width}x{height}")
    x0, y0, x1, y1 = box.corners()
    cx0, cx1 = min(max(x0, 0.0), width), min(max(x1, 0.0), width)
    cy0, cy1 = min(max(y0, 0.0), height), min(max(y1, 0.0), height)
    if cx1 <= cx0 or cy1 <= cy0:
        raise EmptyBoxError(f"Box {box} lies outside the {width}x{height} image")
    if (cx0, cy0, cx1, cy1) == (x0, y0, x1, y1):
        return box
    return BBox.from_corners(cx0, cy0, cx1, cy1)


def box_inside(box: BBox, width: float, height: float, *, tol: float = 1e-6) -> bool:
    x0, y0, x1, y1 = box.corners()
    return x0 >= -tol and y0 >= -tol and x1 <= width + tol and y1 <= height + tol


# ---------------------------------------------------------------------------
# Array helpers (``(N, 4)`` center-format numpy arrays)
# ---------------------------------------------------------------------------


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack([box.as_array() for box in boxes])


def array_to_boxes(arr: np.ndarray) -> list[BBox]:
    return [BBox(*map(float, row)) for row in np.asarray(arr, dtype=np.float64)]


def to_corners(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    half = arr[:, 2:] / 2.0
    return np.concatenate([arr[:, :2] - half, arr[:, :2] + half], axis=1)


def from_corners(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    return np.concatenate(
        [(arr[:, :2] + arr[:, 2:]) / 2.0, arr[:, 2:] - arr[:, :2]], axis=1
    )


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` center-format arrays."""

    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    ca, cb = to_corners(a), to_corners(b)
    inter_w = np.maximum(
        0.0,
        np.minimum(ca[:, None, 2], cb[None, :, 2])
        - np.maximum(ca[:, None, 0], cb[None, :, 0]),
    )
    inter_h = np.maximum(
        0.0,
        np.minimum(ca[:, None, 3], cb[None, :, 3])
        - np.maximum(ca[:, None, 1], cb[None, :, 1]),
    )
    inter = inter_w * inter_h
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    return inter / (area_a + area_b - inter)


# ---------------------------------------------------------------------------
# Tensor helpers (differentiable, used by the network and the losses)
# ---------------------------------------------------------------------------


def encode_deltas_tensor(anchors: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return torch.stack(
        [
            (targets[:, 0] - anchors[:, 0]) / anchors[:, 2],
            (targets[:, 1] - anchors[:, 1]) / anchors[:, 3],
            torch.log(targets[:, 2] / anchors[:, 2]),
            torch.log(targets[:, 3] / anchors[:, 3]),
        ],
        dim=1,
    )


def decode_deltas_tensor(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    dw = deltas[:, 2].clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO)
    dh = deltas[:, 3].clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO)
    return torch.stack(
        [
            anchors[:, 0] + deltas[:, 0] * anchors[:, 2],
            anchors[:, 1] + deltas[:, 1] * anchors[:, 3],
            anchors[:, 2] * torch.exp(dw),
            anchors[:, 3] * torch.exp(dh),
        ],
        dim=1,
    )


def aligned_iou_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise IoU of two ``(N, 4)`` center-format tensors."""

    a_half, b_half = a[:, 2:] / 2.0, b[:, 2:] / 2.0
    lo = torch.maximum(a[:, :2] - a_half, b[:, :2] - b_half)
    hi = torch.minimum(a[:, :2] + a_half, b[:, :2] + b_half)
    wh = (hi - lo).clamp(min=0.0)
    inter = wh[:, 0] * wh[:, 1]
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return inter / union


def clip_boxes_tensor(
    boxes: torch.Tensor, width: float, height: float, *, min_size: float = 1.0
) -> torch.Tensor:
    """Clamp center-format boxes into the image, keeping at least ``min_size``."""

    size = boxes.new_tensor([width, height])
    half = boxes[:, 2:] / 2.0
    lo = torch.minimum((boxes[:, :2] - half).clamp(min=0.0), size - min_size)
    hi = torch.maximum(torch.minimum(boxes[:, :2] + half, size), lo + min_size)
    return torch.cat([(lo + hi) / 2.0, hi - lo], dim=1)


__all__ = [
    "BACKGROUND",
    "IGNORE",
    "BBox",
    "EmptyBoxError",
    "GeometryError",
    "LabeledBox",
    "ScoredBox",
    "aligned_iou_tensor",
    "array_to_boxes",
    "box_inside",
    "boxes_to_array",
    "clip_boxes_tensor",
    "clip_to_image",
    "decode_deltas",
    "decode_deltas_tensor",
    "encode_deltas",
    "encode_deltas_tensor",
    "from_corners",
    "iou",
    "iou_matrix",
    "nms",
    "nms_array",
    "to_corners",
]
