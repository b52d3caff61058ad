"""Supervised fine-tuning, inference and the paired-arm comparison."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..assign import PseudoClassMap, sample_predictions
from ..augment import ViewTransform, make_view, pad_to_stride
from ..checkpoint import CheckpointManifest, load_checkpoint, save_checkpoint
from ..config import RunConfig
from ..data import DatasetManifest, subsample_folds
from ..evaluation import ApReport, Detection, evaluate_ap, knn_purity
from ..geometry import BBox, nms_array
from ..losses import regression_loss, total_loss
from ..netcore import (
    TOTAL_STRIDE,
    DetectorNet,
    NetcoreError,
    backward,
    extract_box_features,
    image_to_tensor,
    project,
    sgd_step,
)
from ..plugins import FlavorContribution
from ..proposals import ProposalSet
from ..utils.metrics import MetricsWriter, StepMetrics
from .pretrain import (
    ONLINE_PREFIX,
    assign_view,
    build_net,
    load_backbone,
    load_for_finetune,
    online_net,
    pseudo_classes_in,
    regress_view,
    take,
)

logger = logging.getLogger(__name__)

PRETRAINED_ARM = "pretrained"
RANDOM_ARM = "random"
NET_PREFIX = "net."
CHECKPOINT_DIRNAME = "checkpoint"
METRICS_FILENAME = "metrics.csv"
EVAL_FILENAME = "eval.json"
PURITY_FILENAME = "purity.json"
FINETUNE_ORDER_STREAM = 30
FINETUNE_STEP_STREAM = 31


class FinetuneError(RuntimeError):
    """Raised when fine-tuning or evaluation cannot proceed."""


@dataclass(slots=True)
class FinetuneResult:
    net: DetectorNet
    history: list[StepMetrics] = field(default_factory=list)

    def loss_at(self, fraction: float) -> float:
        """Mean total loss over a short window ending at ``fraction`` of the run."""

        if not self.history:
            raise FinetuneError("no fine-tuning steps were recorded")
        end = min(len(self.history), max(1, math.ceil(fraction * len(self.history))))
        window = max(1, len(self.history) // 20)
        values = [m.loss_total for m in self.history[max(0, end - window) : end]]
        return float(np.mean(values))


@dataclass(slots=True)
class ArmRun:
    fold: int
    arm: str
    result: FinetuneResult
    directory: Path


def _supervised_terms(
    net: DetectorNet,
    image: np.ndarray,
    truth: ProposalSet,
    classes: np.ndarray,
    config: RunConfig,
    flavor: FlavorContribution,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor | None, int]:
    """Classification and regression loss of one labelled image."""

    classifier = net.classifier
    assert classifier is not None
    out = regress_view(net, net, image, config, flavor, backbone_grad=True)
    pseudo = scores = None
    if not flavor.dense:
        # set prediction matches on class probabilities as well as geometry
        with torch.no_grad():
            features = extract_box_features(net, out.levels, out.clipped_boxes())
            probs = F.softmax(classifier(features), dim=1)
        scores = probs[:, 1:].numpy()
        pseudo = PseudoClassMap(classes, classifier.out_features - 1)
    assigned = assign_view(
        out, truth.as_array(), config, flavor, pseudo=pseudo, class_scores=scores
    )
    index = sample_predictions(assigned, flavor.sample_cap(config), rng)
    kept = take(assigned, index)
    features = extract_box_features(net, out.levels, out.clipped_boxes(index))
    logits = classifier(features)
    targets = np.zeros(index.size, dtype=np.int64)
    positive = kept.labels > 0
    targets[positive] = classes[kept.labels[positive] - 1] + 1
    if index.size:
        cls_loss = F.cross_entropy(logits, torch.as_tensor(targets))
    else:
        cls_loss = logits.sum() * 0.0
    rows = torch.as_tensor(index, dtype=torch.long)
    reg = regression_loss(
        out.reg.boxes[rows], kept, config.loss, priors=out.priors[rows]
    )
    return cls_loss, None if reg.empty else reg.loss, int(kept.positives.size)


def finetune(
    net: DetectorNet,
    manifest: DatasetManifest,
    config: RunConfig,
    *,
    flavor: FlavorContribution,
    lr: float | None = None,
    weight_decay: float | None = None,
    fold: int = 0,
    metrics: MetricsWriter | None = None,
) -> FinetuneResult:
    """Supervised training on ground truth boxes and classes.

    Batch order and flips depend only on ``(seed, fold, epoch, batch)``, so
    two arms trained on the same fold see identical data.
    """

    if net.classifier is None:
        raise FinetuneError("fine-tuning needs a classifier; call attach_classifier")
    cfg = config.finetune
    lr = cfg.lr if lr is None else lr
    weight_decay = cfg.weight_decay if weight_decay is None else weight_decay
    params = net.params()
    result = FinetuneResult(net)
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(
            [config.seed, FINETUNE_ORDER_STREAM, fold, epoch]
        ).permutation(len(manifest))
        for batch_index, start in enumerate(range(0, len(order), cfg.batch_size)):
            rng = np.random.default_rng(
                [config.seed, FINETUNE_STEP_STREAM, fold, epoch, batch_index]
            )
            params.zero_grad()
            cls_terms: list[torch.Tensor] = []
            reg_terms: list[torch.Tensor] = []
            positives = 0
            for index in order[start : start + cfg.batch_size]:
                record = manifest.images[int(index)]
                if record.classes is None:
                    raise FinetuneError(f"image '{record.id}' carries no class labels")
                flip = bool(rng.random() < config.aug.hflip_p)
                truth = ProposalSet(
                    record.id, record.width, record.height, list(record.boxes)
                )
                view = make_view(
                    manifest.load_image(record),
                    truth,
                    ViewTransform.scaled(record.width, record.height, 1.0, hflip=flip),
                )
                cls_loss, reg_loss, count = _supervised_terms(
                    net,
                    view.image,
                    view.proposals,
                    np.asarray(record.classes, dtype=np.int64),
                    config,
                    flavor,
                    rng,
                )
                cls_terms.append(cls_loss)
                if reg_loss is not None:
                    reg_terms.append(reg_loss)
                positives += count
            cls_mean = torch.stack(cls_terms).mean()
            reg_mean = torch.stack(reg_terms).mean() if reg_terms else torch.zeros(())
            total = total_loss(0.0, reg_mean, config.loss, cls=cls_mean)
            backward(total)
            sgd_step(params, lr, weight_decay)
            row = StepMetrics(
                step=step,
                loss_total=float(total.detach()),
                loss_con=float(cls_mean.detach()),
                loss_reg=float(reg_mean.detach()),
                lr=lr,
                pos_count=positives,
                loss_cls=float(cls_mean.detach()),
            )
            result.history.append(row)
            if metrics is not None:
                metrics.write(row)
            step += 1
        logger.info("fine-tune fold %d epoch %d/%d done", fold, epoch + 1, cfg.epochs)
    return result


def detect(
    net: DetectorNet,
    image: np.ndarray,
    image_id: str,
    config: RunConfig,
    *,
    flavor: FlavorContribution,
) -> list[Detection]:
    """Scored, per-class suppressed detections for one image."""

    if net.classifier is None:
        raise FinetuneError("inference needs a classifier")
    cfg = config.finetune
    height, width = image.shape[:2]
    with torch.no_grad():
        out = regress_view(net, net, image, config, flavor, backbone_grad=False)
        out.image_size = (width, height)
        boxes = out.clipped_boxes()
        features = extract_box_features(net, out.levels, boxes)
        probs = F.softmax(net.classifier(features), dim=1).numpy().astype(np.float64)
    arr = boxes.numpy().astype(np.float64)
    detections: list[Detection] = []
    for class_index in range(1, probs.shape[1]):
        scores = probs[:, class_index]
        candidates = np.flatnonzero(scores >= cfg.score_threshold)
        if candidates.size == 0:
            continue
        for kept in nms_array(arr[candidates], scores[candidates], cfg.nms_threshold):
            row = candidates[kept]
            detections.append(
                Detection(
                    image_id,
                    BBox(*map(float, arr[row])),
                    class_index - 1,
                    min(1.0, float(scores[row])),
                )
            )
    detections.sort(key=lambda det: -det.score)
    return detections[: cfg.max_detections]


def evaluate_net(
    net: DetectorNet,
    manifest: DatasetManifest,
    config: RunConfig,
    *,
    flavor: FlavorContribution,
) -> ApReport:
    detections: list[Detection] = []
    for record in manifest.images:
        image = manifest.load_image(record)
        detections.extend(detect(net, image, record.id, config, flavor=flavor))
    return evaluate_ap(detections, manifest)


def box_embeddings(
    net: DetectorNet, manifest: DatasetManifest
) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm projected box features of every ground truth box."""

    rows: list[np.ndarray] = []
    classes: list[int] = []
    with torch.no_grad():
        for record in manifest.images:
            if record.classes is None:
                raise FinetuneError(f"image '{record.id}' carries no class labels")
            if not record.boxes:
                continue
            image = manifest.load_image(record)
            out_levels = net.pyramid(_tensor(image))
            boxes = torch.as_tensor(
                np.stack([box.as_array() for box in record.boxes]),
                dtype=out_levels[0].dtype,
            )
            features = extract_box_features(net, out_levels, boxes)
            rows.append(project(net.projection, features).numpy())
            classes.extend(record.classes)
    if not rows:
        raise FinetuneError("no ground truth boxes to embed")
    return np.concatenate(rows), np.asarray(classes, dtype=np.int64)


def _tensor(image: np.ndarray) -> torch.Tensor:
    return image_to_tensor(pad_to_stride(image, TOTAL_STRIDE))


def embedding_purity(
    manifest: DatasetManifest,
    config: RunConfig,
    pretrained: CheckpointManifest,
    *,
    flavor: FlavorContribution,
) -> dict[str, float]:
    """k-NN purity of box embeddings at random init and after pre-training.

    Both networks share the pre-trained backbone, so the difference isolates
    the neck, head and projection.
    """

    k = config.finetune.purity_k
    pseudo_classes = pseudo_classes_in(pretrained.select(ONLINE_PREFIX))
    baseline = build_net(config, flavor, pseudo_classes=pseudo_classes)
    load_backbone(baseline, pretrained)
    trained = online_net(pretrained, config, flavor=flavor)
    scores = {}
    for name, net in ((RANDOM_ARM, baseline), (PRETRAINED_ARM, trained)):
        embeddings, classes = box_embeddings(net, manifest)
        scores[name] = knn_purity(embeddings, classes, k)
    logger.info(
        "purity@%d random %.3f pretrained %.3f",
        k,
        scores[RANDOM_ARM],
        scores[PRETRAINED_ARM],
    )
    return scores


def _arm_net(
    arm: str,
    config: RunConfig,
    num_classes: int,
    pretrained: CheckpointManifest | None,
    flavor: FlavorContribution,
) -> DetectorNet:
    if arm == PRETRAINED_ARM and pretrained is not None:
        return load_for_finetune(pretrained, config, num_classes, flavor=flavor)
    net = build_net(config, flavor)
    if pretrained is not None:
        load_backbone(net, pretrained)
    net.attach_classifier(num_classes, config.seed + 2)
    return net


def arm_names(pretrained: CheckpointManifest | None) -> tuple[str, ...]:
    return (PRETRAINED_ARM, RANDOM_ARM) if pretrained is not None else (RANDOM_ARM,)


def run_paired_finetune(
    train: DatasetManifest,
    config: RunConfig,
    out_dir: Path,
    *,
    flavor: FlavorContribution,
    pretrained: CheckpointManifest | None = None,
) -> list[ArmRun]:
    """Fine-tune every arm on every low-data fold with identical data order.

    The random arm keeps the image-domain backbone when a checkpoint is
    given; only the neck, head and classifier start from scratch. The
    pre-trained arm trains with the configured lr and weight-decay
    multipliers.
    """

    cfg = config.finetune
    folds = subsample_folds(train, cfg.fraction, cfg.folds, config.seed)
    runs: list[ArmRun] = []
    for fold, subset in enumerate(folds):
        for arm in arm_names(pretrained):
            net = _arm_net(arm, config, train.num_classes, pretrained, flavor)
            lr, weight_decay = cfg.lr, cfg.weight_decay
            if arm == PRETRAINED_ARM:
                lr *= cfg.pretrained_lr_mult
                weight_decay *= cfg.pretrained_wd_mult
            arm_dir = out_dir / f"fold-{fold}" / arm
            with MetricsWriter(arm_dir / METRICS_FILENAME) as writer:
                result = finetune(
                    net,
                    subset,
                    config,
                    flavor=flavor,
                    lr=lr,
                    weight_decay=weight_decay,
                    fold=fold,
                    metrics=writer,
                )
            save_checkpoint(
                arm_dir / CHECKPOINT_DIRNAME,
                CheckpointManifest(
                    kind="finetune",
                    arrays=net.params().to_arrays(NET_PREFIX),
                    config=config.to_flat_dict(),
                    flavor=config.flavor,
                    step=len(result.history),
                    epoch=cfg.epochs,
                    rng_state={"seed": config.seed, "fold": fold},
                ),
            )
            runs.append(ArmRun(fold, arm, result, arm_dir))
    return runs


def load_finetuned(
    directory: Path, config: RunConfig, *, flavor: FlavorContribution
) -> DetectorNet:
    manifest = load_checkpoint(directory, kind="finetune")
    arrays = manifest.select(NET_PREFIX)
    weight = arrays.get("classifier.weight")
    if weight is None:
        raise FinetuneError(f"checkpoint at {directory} has no classifier")
    net = build_net(config, flavor, pseudo_classes=pseudo_classes_in(arrays))
    net.attach_classifier(int(weight.shape[0]) - 1, config.seed)
    try:
        net.params().load_arrays(arrays)
    except NetcoreError as exc:
        raise FinetuneError(f"cannot load fine-tuned weights: {exc}") from exc
    return net


def fold_directories(runs_dir: Path) -> list[Path]:
    folds = [p for p in runs_dir.glob("fold-*") if p.is_dir()]
    return sorted(folds, key=lambda p: int(p.name.split("-", 1)[1]))


def evaluate_runs(
    runs_dir: Path,
    manifest: DatasetManifest,
    config: RunConfig,
    *,
    flavor: FlavorContribution,
    pretrained: CheckpointManifest | None = None,
) -> dict[str, dict[str, ApReport]]:
    """Evaluate every arm of every fold and write ``eval.json`` per fold."""

    folds = fold_directories(runs_dir)
    if not folds:
        raise FinetuneError(f"no fold directories under {runs_dir}")
    results: dict[str, dict[str, ApReport]] = {}
    for fold_dir in folds:
        reports: dict[str, ApReport] = {}
        for arm_dir in sorted(p for p in fold_dir.iterdir() if p.is_dir()):
            checkpoint = arm_dir / CHECKPOINT_DIRNAME
            if not checkpoint.exists():
                continue
            net = load_finetuned(checkpoint, config, flavor=flavor)
            reports[arm_dir.name] = evaluate_net(net, manifest, config, flavor=flavor)
            logger.info(
                "%s/%s AP50 %.3f",
                fold_dir.name,
                arm_dir.name,
                reports[arm_dir.name].ap50,
            )
        payload = {arm: report.as_dict() for arm, report in reports.items()}
        (fold_dir / EVAL_FILENAME).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        results[fold_dir.name] = reports
    if pretrained is not None:
        purity = embedding_purity(manifest, config, pretrained, flavor=flavor)
        purity["k"] = config.finetune.purity_k
        (runs_dir / PURITY_FILENAME).write_text(
            json.dumps(purity, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return results


__all__ = [
    "ArmRun",
    "CHECKPOINT_DIRNAME",
    "EVAL_FILENAME",
    "FinetuneError",
    "FinetuneResult",
    "METRICS_FILENAME",
    "PRETRAINED_ARM",
    "PURITY_FILENAME",
    "RANDOM_ARM",
    "box_embeddings",
    "detect",
    "embedding_purity",
    "evaluate_net",
    "evaluate_runs",
    "finetune",
    "fold_directories",
    "load_finetuned",
    "run_paired_finetune",
]
