"""Target assignment: map detector predictions to proposal indices.

Three rules are provided, one per detector flavor: max-IoU against anchors,
point-in-box with per-level scale ranges, and min-cost bipartite matching
for set prediction. Labels follow :mod:`boxpretrain.geometry`:
``BACKGROUND`` (0), ``IGNORE`` (-1) or a proposal index in ``1..n``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import kmeans_plusplus

from .geometry import BACKGROUND, IGNORE, BBox, boxes_to_array, iou_matrix

logger = logging.getLogger(__name__)


class AssignmentError(RuntimeError):
    """Raised when an assignment problem is ill-posed."""


BoxesLike = Sequence[BBox] | np.ndarray


def _as_array(boxes: BoxesLike) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return boxes_to_array(list(boxes))


@dataclass(slots=True)
class AssignmentResult:
    """Per-prediction labels with the matched proposal box of each positive."""

    labels: np.ndarray
    matched: np.ndarray
    num_proposals: int
    cost: float | None = None

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (
            self.labels.min() < IGNORE or self.labels.max() > self.num_proposals
        ):
            raise AssignmentError("labels must reference existing proposals")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels > 0)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == BACKGROUND)

    def matched_box(self, index: int) -> BBox | None:
        if self.labels[index] <= 0:
            return None
        return BBox(*map(float, self.matched[index]))

    @classmethod
    def background(cls, count: int, num_proposals: int = 0) -> "AssignmentResult":
        return cls(
            labels=np.full(count, BACKGROUND, dtype=np.int64),
            matched=np.zeros((count, 4), dtype=np.float64),
            num_proposals=num_proposals,
        )

    @classmethod
    def from_labels(
        cls, labels: np.ndarray, proposals: np.ndarray, cost: float | None = None
    ) -> "AssignmentResult":
        matched = np.zeros((labels.shape[0], 4), dtype=np.float64)
        positive = labels > 0
        matched[positive] = proposals[labels[positive] - 1]
        return cls(labels, matched, int(proposals.shape[0]), cost)


@dataclass(slots=True)
class PseudoClassMap:
    """Cluster id in ``[0, k)`` for every proposal row fed to :func:`kmeans`."""

    labels: np.ndarray
    k: int
    inertia_history: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def slice(self, start: int, stop: int) -> "PseudoClassMap":
        return PseudoClassMap(self.labels[start:stop], self.k, [])


def assign_iou(
    candidates: BoxesLike,
    proposals: BoxesLike,
    pos_thr: float,
    neg_thr: float,
    *,
    low_quality_rescue: bool = True,
) -> AssignmentResult:
    """Max-IoU assignment with optional low-quality match rescue.

    Each candidate takes its highest-IoU proposal (lowest index on ties).
    It is positive at ``>= pos_thr``, background below ``neg_thr`` and
    ignored in between. With rescue enabled, every proposal then forces its
    best candidate (lowest candidate index on ties) positive. A candidate
    claimed by several proposals goes to the one it overlaps most, lowest
    proposal index on ties. Proposals that overlap no candidate at all are
    not rescued.
    """

    if not 0.0 <= neg_thr <= pos_thr <= 1.0:
        raise AssignmentError(
            f"thresholds require 0 <= neg <= pos <= 1, got neg={neg_thr} pos={pos_thr}"
        )
    cand = _as_array(candidates)
    props = _as_array(proposals)
    if props.shape[0] == 0 or cand.shape[0] == 0:
        return AssignmentResult.background(cand.shape[0], props.shape[0])

    overlaps = iou_matrix(cand, props)
    best_idx = overlaps.argmax(axis=1)
    best = overlaps[np.arange(cand.shape[0]), best_idx]
    labels = np.full(cand.shape[0], IGNORE, dtype=np.int64)
    labels[best < neg_thr] = BACKGROUND
    labels[best >= pos_thr] = best_idx[best >= pos_thr] + 1

    if low_quality_rescue:
        cols = np.arange(props.shape[0])
        best_cand = overlaps.argmax(axis=0)
        claims = np.zeros_like(overlaps, dtype=bool)
        claims[best_cand, cols] = overlaps[best_cand, cols] > 0.0
        rescued = claims.any(axis=1)
        claimed = np.where(claims, overlaps, -1.0)
        labels[rescued] = claimed[rescued].argmax(axis=1) + 1
    return AssignmentResult.from_labels(labels, props)


def validate_scale_ranges(scale_ranges: Sequence[tuple[float, float]]) -> None:
    if not scale_ranges:
        raise AssignmentError("at least one scale range is required")
    if scale_ranges[0][0] != 0.0 or not math.isinf(scale_ranges[-1][1]):
        raise AssignmentError("scale ranges must cover (0, inf)")
    for (_, hi), (lo, _) in zip(scale_ranges, scale_ranges[1:]):
        if hi != lo:
            raise AssignmentError("scale ranges must be contiguous")
    if any(lo >= hi for lo, hi in scale_ranges):
        raise AssignmentError("every scale range needs lo < hi")


def split_scale_ranges(split: float, levels: int = 2) -> list[tuple[float, float]]:
    """``[(0, s], (s, 2s], ..., (.., inf)]`` for ``levels`` pyramid levels."""

    bounds = [0.0] + [split * (2**i) for i in range(levels - 1)] + [math.inf]
    return list(zip(bounds[:-1], bounds[1:]))


def grid_locations(
    level_shapes: Sequence[tuple[int, int]], strides: Sequence[int]
) -> tuple[np.ndarray, np.ndarray]:
    """Pixel centers of every feature-map cell, rows ordered by (level, y, x)."""

    points, levels = [], []
    for level, ((height, width), stride) in enumerate(zip(level_shapes, strides)):
        ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
        centers = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        points.append((centers + 0.5) * stride)
        levels.append(np.full(height * width, level, dtype=np.int64))
    if not points:
        return np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    return np.concatenate(points), np.concatenate(levels)


def assign_center(
    points: np.ndarray,
    point_levels: np.ndarray,
    proposals: BoxesLike,
    scale_ranges: Sequence[tuple[float, float]],
) -> AssignmentResult:
    """Point-in-box assignment with per-level scale ranges.

    ``points`` is ``(N, 2)`` pixel locations and ``point_levels`` their
    pyramid level. A point is positive for a proposal when it lies strictly
    inside the box and the box's longest side falls in ``(lo, hi]`` of the
    point's level. The smallest containing box wins, lowest index on ties.
    """

    validate_scale_ranges(scale_ranges)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    point_levels = np.asarray(point_levels, dtype=np.int64)
    props = _as_array(proposals)
    if props.shape[0] == 0 or points.shape[0] == 0:
        return AssignmentResult.background(points.shape[0], props.shape[0])

    half = props[:, 2:] / 2.0
    x0, y0 = props[:, 0] - half[:, 0], props[:, 1] - half[:, 1]
    x1, y1 = props[:, 0] + half[:, 0], props[:, 1] + half[:, 1]
    px, py = points[:, 0:1], points[:, 1:2]
    inside = (px > x0) & (px < x1) & (py > y0) & (py < y1)

    max_side = props[:, 2:].max(axis=1)
    prop_level = np.full(props.shape[0], -1, dtype=np.int64)
    for level, (lo, hi) in enumerate(scale_ranges):
        prop_level[(max_side > lo) & (max_side <= hi)] = level
    valid = inside & (point_levels[:, None] == prop_level[None, :])

    areas = np.where(valid, (props[:, 2] * props[:, 3])[None, :], np.inf)
    winner = areas.argmin(axis=1)
    labels = np.where(valid.any(axis=1), winner + 1, BACKGROUND).astype(np.int64)
    return AssignmentResult.from_labels(labels, props)


def min_cost_matching(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Hungarian matching of every column to a distinct row.

    Returns ``(rows, cols, total)`` with ``cols`` in ascending order.
    """

    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise AssignmentError("cost must be a matrix")
    if cost.shape[0] < cost.shape[1]:
        raise AssignmentError(
            f"infeasible matching: {cost.shape[0]} predictions "
            f"for {cost.shape[1]} proposals"
        )
    if not np.all(np.isfinite(cost)):
        raise AssignmentError("cost matrix holds non-finite values")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(cols, kind="stable")
    rows, cols = rows[order], cols[order]
    return rows, cols, float(cost[rows, cols].sum())


@dataclass(slots=True, frozen=True)
class MatchingWeights:
    l1: float = 5.0
    iou: float = 2.0
    cls: float = 1.0


def matching_cost(
    predictions: np.ndarray,
    proposals: np.ndarray,
    image_size: tuple[int, int],
    weights: MatchingWeights,
    *,
    class_scores: np.ndarray | None = None,
    pseudo: PseudoClassMap | None = None,
) -> np.ndarray:
    """Pairwise cost ``w_l1 * L1 + w_iou * (1 - IoU) - w_cls * p(class)``.

    The L1 distance is taken on center-format coordinates divided by the
    image extent. ``class_scores`` are per-prediction probabilities over the
    pseudo classes.
    """

    width, height = image_size
    scale = np.array([width, height, width, height], dtype=np.float64)
    l1 = np.abs(
        predictions[:, None, :] / scale - proposals[None, :, :] / scale
    ).sum(axis=2)
    cost = weights.l1 * l1 + weights.iou * (1.0 - iou_matrix(predictions, proposals))
    if pseudo is not None and class_scores is not None:
        if len(pseudo) != proposals.shape[0]:
            raise AssignmentError("pseudo classes must cover every proposal")
        cost = cost - weights.cls * class_scores[:, pseudo.labels]
    return cost


def assign_hungarian(
    predictions: BoxesLike,
    proposals: BoxesLike,
    image_size: tuple[int, int],
    weights: MatchingWeights = MatchingWeights(),
    *,
    class_scores: np.ndarray | None = None,
    pseudo: PseudoClassMap | None = None,
) -> AssignmentResult:
    """One-to-one assignment minimizing the total matching cost.

    Matched predictions take their proposal's index; all others are
    background.
    """

    preds = _as_array(predictions)
    props = _as_array(proposals)
    if props.shape[0] == 0:
        return AssignmentResult.background(preds.shape[0])
    if preds.shape[0] < props.shape[0]:
        raise AssignmentError(
            f"infeasible matching: {preds.shape[0]} predictions "
            f"for {props.shape[0]} proposals"
        )
    cost = matching_cost(
        preds, props, image_size, weights, class_scores=class_scores, pseudo=pseudo
    )
    rows, cols, total = min_cost_matching(cost)
    labels = np.full(preds.shape[0], BACKGROUND, dtype=np.int64)
    labels[rows] = cols + 1
    return AssignmentResult.from_labels(labels, props, cost=total)


def _squared_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def kmeans(
    features: np.ndarray, k: int, seed: int, max_iters: int = 50
) -> PseudoClassMap:
    """k-means++ seeding followed by Lloyd iterations.

    Iteration stops at an assignment fixpoint or after ``max_iters``
    updates. Empty clusters keep their previous center, which keeps the
    recorded inertia non-increasing.
    """

    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise AssignmentError("features must be a matrix")
    if k <= 0 or k > x.shape[0]:
        raise AssignmentError(f"k must lie in [1, {x.shape[0]}], got {k}")

    centers, _ = kmeans_plusplus(x, n_clusters=k, random_state=seed)
    dists = _squared_distances(x, centers)
    labels = dists.argmin(axis=1)
    history = [float(dists[np.arange(x.shape[0]), labels].sum())]
    for iteration in range(max_iters):
        for cluster in range(k):
            members = labels == cluster
            if members.any():
                centers[cluster] = x[members].mean(axis=0)
        dists = _squared_distances(x, centers)
        new_labels = dists.argmin(axis=1)
        history.append(float(dists[np.arange(x.shape[0]), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            logger.debug("k-means converged after %d iterations", iteration + 1)
            break
        labels = new_labels
    return PseudoClassMap(labels.astype(np.int64), k, history)


def sample_predictions(
    assigned: AssignmentResult, max_count: int, rng: np.random.Generator
) -> np.ndarray:
    """Pick up to ``max_count`` predictions, positives first.

    Ignored predictions are never sampled. The result is sorted ascending.
    """

    if max_count <= 0:
        raise AssignmentError("max_count must be positive")
    positives = assigned.positives
    negatives = assigned.negatives
    if positives.size > max_count:
        positives = rng.choice(positives, size=max_count, replace=False)
    quota = max_count - positives.size
    if negatives.size > quota:
        negatives = rng.choice(negatives, size=quota, replace=False)
    return np.sort(np.concatenate([positives, negatives]).astype(np.int64))


__all__ = [
    "AssignmentError",
    "AssignmentResult",
    "MatchingWeights",
    "PseudoClassMap",
    "assign_center",
    "assign_hungarian",
    "assign_iou",
    "grid_locations",
    "kmeans",
    "matching_cost",
    "min_cost_matching",
    "sample_predictions",
    "split_scale_ranges",
    "validate_scale_ranges",
]
