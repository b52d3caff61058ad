"""COCO-style box AP and the k-NN purity of box embeddings."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from sklearn.neighbors import NearestNeighbors

from .data import DatasetManifest
from .geometry import BBox, boxes_to_array, iou_matrix

logger = logging.getLogger(__name__)

COCO_IOU_THRESHOLDS: tuple[float, ...] = tuple(
    float(t) for t in np.round(np.linspace(0.5, 0.95, 10), 2)
)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class EvaluationError(RuntimeError):
    """Raised when detections or embeddings cannot be evaluated."""


@dataclass(slots=True, frozen=True)
class Detection:
    image_id: str
    box: BBox
    class_id: int
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise EvaluationError(f"score must lie in [0, 1], got {self.score}")


@dataclass(slots=True)
class ApReport:
    ap: float
    ap50: float
    ap75: float
    per_class: dict[str, float] = field(default_factory=dict)
    per_threshold: dict[float, float] = field(default_factory=dict)

    def as_dict(self) -> dict[str, object]:
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "per_class": dict(self.per_class),
            "per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
        }


GroundTruth = Mapping[str, Sequence[tuple[BBox, int]]]


def ground_truth_from_manifest(manifest: DatasetManifest) -> dict[str, list]:
    truth: dict[str, list[tuple[BBox, int]]] = {}
    for record in manifest.images:
        if record.classes is None:
            raise EvaluationError(f"image '{record.id}' carries no class labels")
        truth[record.id] = list(zip(record.boxes, record.classes))
    return truth


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from TP flags ordered by descending score."""

    if num_gt == 0:
        raise EvaluationError("AP is undefined without ground truth")
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / num_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # precision envelope
    for i in range(precision.size - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    clipped = np.minimum(idx, precision.size - 1)
    sampled = np.where(idx < precision.size, precision[clipped], 0.0)
    return float(sampled.mean())


def _match_class(
    detections: Sequence[Detection],
    truth: Mapping[str, np.ndarray],
    threshold: float,
) -> np.ndarray:
    matched = {key: np.zeros(len(gt), dtype=bool) for key, gt in truth.items()}
    tp = np.zeros(len(detections), dtype=np.float64)
    for d, det in enumerate(detections):
        gt = truth.get(det.image_id)
        if gt is None or gt.shape[0] == 0:
            continue
        overlaps = iou_matrix(det.box.as_array()[None, :], gt)[0]
        overlaps[matched[det.image_id]] = -1.0
        best = int(overlaps.argmax())
        if overlaps[best] >= threshold:
            tp[d] = 1.0
            matched[det.image_id][best] = True
    return tp


def evaluate_ap(
    detections: Iterable[Detection],
    ground_truth: DatasetManifest | GroundTruth,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
    *,
    class_names: Sequence[str] | None = None,
) -> ApReport:
    """Mean AP over classes with ground truth and over ``iou_thresholds``.

    Detections are ranked by descending score (input order on ties). Each
    detection is matched to its highest-IoU ground truth box not yet taken,
    counting as a true positive when that IoU reaches the threshold.
    """

    if isinstance(ground_truth, DatasetManifest):
        class_names = class_names or ground_truth.class_names
        ground_truth = ground_truth_from_manifest(ground_truth)
    dets = list(detections)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    dets = [dets[i] for i in order]

    per_class_truth: dict[int, dict[str, list[BBox]]] = defaultdict(dict)
    for image_id, items in ground_truth.items():
        for box, class_id in items:
            per_class_truth[class_id].setdefault(image_id, []).append(box)
    classes = sorted(per_class_truth)
    if not classes:
        logger.warning("no ground truth boxes; AP reported as 0")
        return ApReport(0.0, 0.0, 0.0)

    thresholds = [float(t) for t in iou_thresholds]
    table = np.zeros((len(thresholds), len(classes)), dtype=np.float64)
    for c_idx, class_id in enumerate(classes):
        truth = {
            image_id: boxes_to_array(boxes)
            for image_id, boxes in per_class_truth[class_id].items()
        }
        num_gt = sum(arr.shape[0] for arr in truth.values())
        class_dets = [det for det in dets if det.class_id == class_id]
        for t_idx, threshold in enumerate(thresholds):
            tp = _match_class(class_dets, truth, threshold)
            table[t_idx, c_idx] = interpolated_ap(tp, num_gt)

    def _name(class_id: int) -> str:
        if class_names is not None and 0 <= class_id < len(class_names):
            return class_names[class_id]
        return str(class_id)

    per_threshold = dict(zip(thresholds, table.mean(axis=1).tolist()))
    return ApReport(
        ap=float(table.mean()),
        ap50=_at(per_threshold, 0.5),
        ap75=_at(per_threshold, 0.75),
        per_class={_name(c): float(v) for c, v in zip(classes, table.mean(axis=0))},
        per_threshold=per_threshold,
    )


def _at(per_threshold: Mapping[float, float], threshold: float) -> float:
    for key, value in per_threshold.items():
        if abs(key - threshold) < 1e-9:
            return value
    return float("nan")


def knn_purity(
    embeddings: np.ndarray | torch.Tensor, classes: Sequence[int] | np.ndarray, k: int
) -> float:
    """Average fraction of each row's ``k`` cosine neighbours sharing its class.

    A row is never its own neighbour.
    """

    if torch.is_tensor(embeddings):
        embeddings = embeddings.detach().cpu().numpy()
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(classes)
    if x.ndim != 2 or x.shape[0] != labels.shape[0]:
        raise EvaluationError("embeddings and classes must have matching rows")
    if k < 1 or k >= x.shape[0]:
        raise EvaluationError(f"k must lie in [1, {x.shape[0] - 1}], got {k}")
    index = NearestNeighbors(n_neighbors=k, metric="cosine", algorithm="brute")
    neighbours = index.fit(x).kneighbors(return_distance=False)
    return float((labels[neighbours] == labels[:, None]).mean())


__all__ = [
    "ApReport",
    "COCO_IOU_THRESHOLDS",
    "Detection",
    "EvaluationError",
    "evaluate_ap",
    "ground_truth_from_manifest",
    "interpolated_ap",
    "knn_purity",
]
