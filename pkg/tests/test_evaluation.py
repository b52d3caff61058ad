from __future__ import annotations

import numpy as np
import pytest
import torch
from boxpretrain.evaluation import (
    COCO_IOU_THRESHOLDS,
    Detection,
    EvaluationError,
    evaluate_ap,
    interpolated_ap,
    knn_purity,
)
from boxpretrain.geometry import BBox, iou

GT_BOX = BBox(20.0, 20.0, 10.0, 10.0)
TRUTH = {"img": [(GT_BOX, 0)]}


def test_coco_thresholds_step_by_five_hundredths() -> None:
    assert COCO_IOU_THRESHOLDS[0] == 0.5
    assert COCO_IOU_THRESHOLDS[-1] == 0.95
    assert len(COCO_IOU_THRESHOLDS) == 10


def test_perfect_detection_scores_one() -> None:
    report = evaluate_ap([Detection("img", GT_BOX, 0, 0.9)], TRUTH)

    assert report.ap == pytest.approx(1.0)
    assert report.ap50 == pytest.approx(1.0)
    assert report.ap75 == pytest.approx(1.0)


def test_false_positive_ranked_above_true_positive_halves_ap50() -> None:
    detections = [
        Detection("img", BBox(50.0, 50.0, 10.0, 10.0), 0, 0.9),
        Detection("img", GT_BOX, 0, 0.8),
    ]

    report = evaluate_ap(detections, TRUTH)

    assert report.ap50 == pytest.approx(0.5)


def test_duplicate_detection_counts_as_false_positive() -> None:
    detections = [
        Detection("img", GT_BOX, 0, 0.9),
        Detection("img", GT_BOX, 0, 0.8),
    ]

    report = evaluate_ap(detections, TRUTH)

    assert report.ap50 == pytest.approx(interpolated_ap(np.array([1.0, 0.0]), 1))
    assert report.ap50 == pytest.approx(1.0)


def test_wrong_class_does_not_match() -> None:
    truth = {"img": [(GT_BOX, 0), (BBox(50.0, 50.0, 8.0, 8.0), 1)]}
    detections = [Detection("img", GT_BOX, 1, 0.9)]

    report = evaluate_ap(detections, truth, class_names=["disk", "cross"])

    assert report.ap50 == 0.0
    assert set(report.per_class) == {"disk", "cross"}


def test_loose_box_passes_ap50_but_not_ap75() -> None:
    # IoU = 100 / 144 ~= 0.69
    loose = BBox(20.0, 20.0, 12.0, 12.0)

    report = evaluate_ap([Detection("img", loose, 0, 0.9)], TRUTH)

    assert report.ap50 == pytest.approx(1.0)
    assert report.ap75 == 0.0


def test_no_detections_and_no_ground_truth() -> None:
    assert evaluate_ap([], TRUTH).ap == 0.0
    assert evaluate_ap([], {"img": []}).ap == 0.0
    with pytest.raises(EvaluationError):
        interpolated_ap(np.array([1.0]), 0)


def test_detection_score_must_be_a_probability() -> None:
    with pytest.raises(EvaluationError):
        Detection("img", GT_BOX, 0, 1.2)


def test_knn_purity_of_separated_clusters_is_one() -> None:
    embeddings = np.array(
        [[1.0, 0.0], [0.9, 0.1], [0.95, 0.05], [0.0, 1.0], [0.1, 0.9], [0.05, 1.0]]
    )
    classes = [0, 0, 0, 1, 1, 1]

    assert knn_purity(embeddings, classes, k=2) == pytest.approx(1.0)
    assert knn_purity(torch.from_numpy(embeddings), classes, k=2) == pytest.approx(
        1.0
    )


def test_knn_purity_of_interleaved_classes() -> None:
    embeddings = np.array([[1.0, 0.0], [1.0, 0.01], [0.0, 1.0], [0.01, 1.0]])

    # Each row's nearest neighbour carries the other class.
    assert knn_purity(embeddings, [0, 1, 0, 1], k=1) == pytest.approx(0.0)


def test_knn_purity_validates_k() -> None:
    embeddings = np.eye(3)

    with pytest.raises(EvaluationError):
        knn_purity(embeddings, [0, 1, 2], k=3)
    with pytest.raises(EvaluationError):
        knn_purity(embeddings, [0, 1], k=1)


def _naive_ap(
    detections: list[Detection],
    truth: dict[str, list[tuple[BBox, int]]],
    threshold: float,
) -> float:
    ranked = sorted(detections, key=lambda det: -det.score)
    classes = sorted({c for items in truth.values() for _, c in items})
    recall_points = np.linspace(0.0, 1.0, 101)
    per_class = []
    for class_id in classes:
        gt = {
            image_id: [box for box, c in items if c == class_id]
            for image_id, items in truth.items()
        }
        taken = {image_id: [False] * len(boxes) for image_id, boxes in gt.items()}
        num_gt = sum(len(boxes) for boxes in gt.values())
        hits = 0
        curve = []
        for rank, det in enumerate(d for d in ranked if d.class_id == class_id):
            best, best_iou = None, -1.0
            for g, box in enumerate(gt.get(det.image_id, [])):
                if not taken[det.image_id][g] and iou(det.box, box) > best_iou:
                    best, best_iou = g, iou(det.box, box)
            if best is not None and best_iou >= threshold:
                taken[det.image_id][best] = True
                hits += 1
            curve.append((hits / num_gt, hits / (rank + 1)))
        sampled = [
            max((p for r, p in curve if r >= point), default=0.0)
            for point in recall_points
        ]
        per_class.append(sum(sampled) / len(sampled))
    return sum(per_class) / len(per_class)


def _random_instance(
    rng: np.random.Generator,
) -> tuple[list[Detection], dict[str, list[tuple[BBox, int]]]]:
    truth: dict[str, list[tuple[BBox, int]]] = {}
    detections = []
    for image in range(3):
        image_id = f"img-{image}"
        truth[image_id] = []
        for _ in range(int(rng.integers(0, 5))):
            cx, cy = rng.uniform(8.0, 56.0, size=2)
            w, h = rng.uniform(6.0, 20.0, size=2)
            box = BBox(float(cx), float(cy), float(w), float(h))
            class_id = int(rng.integers(0, 2))
            truth[image_id].append((box, class_id))
            if rng.uniform() < 0.8:
                jitter = rng.normal(0.0, 1.5, size=4)
                guess = BBox(
                    box.cx + jitter[0],
                    box.cy + jitter[1],
                    max(1.0, box.w + jitter[2]),
                    max(1.0, box.h + jitter[3]),
                )
                detections.append(
                    Detection(image_id, guess, class_id, float(rng.uniform()))
                )
        for _ in range(int(rng.integers(0, 3))):
            cx, cy = rng.uniform(8.0, 56.0, size=2)
            clutter = BBox(float(cx), float(cy), 10.0, 10.0)
            detections.append(
                Detection(
                    image_id, clutter, int(rng.integers(0, 2)), float(rng.uniform())
                )
            )
    return detections, truth


def test_ap_matches_naive_evaluator() -> None:
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(150):
        detections, truth = _random_instance(rng)
        if not any(truth.values()):
            continue

        report = evaluate_ap(detections, truth)

        per_threshold = [_naive_ap(detections, truth, t) for t in COCO_IOU_THRESHOLDS]
        assert report.ap50 == pytest.approx(per_threshold[0], abs=1e-9)
        assert report.ap75 == pytest.approx(per_threshold[5], abs=1e-9)
        assert report.ap == pytest.approx(np.mean(per_threshold), abs=1e-9)
        checked += 1
    assert checked > 100


def test_adding_a_true_positive_never_lowers_ap() -> None:
    rng = np.random.default_rng(1)
    for _ in range(150):
        detections, truth = _random_instance(rng)
        uncovered = [
            (image_id, box, class_id)
            for image_id, items in truth.items()
            for box, class_id in items
            if all(
                iou(det.box, box) < 0.5
                for det in detections
                if det.image_id == image_id and det.class_id == class_id
            )
        ]
        if not uncovered:
            continue
        image_id, box, class_id = uncovered[0]
        extra = Detection(image_id, box, class_id, float(rng.uniform()))

        before = evaluate_ap(detections, truth, [0.5]).ap50
        after = evaluate_ap([*detections, extra], truth, [0.5]).ap50

        assert after >= before - 1e-12


def test_knn_purity_of_shuffled_two_class_labels_is_near_half() -> None:
    rng = np.random.default_rng(2)
    embeddings = rng.normal(size=(400, 8))
    classes = rng.permutation(np.repeat([0, 1], 200))

    assert knn_purity(embeddings, classes, k=5) == pytest.approx(0.5, abs=0.05)
