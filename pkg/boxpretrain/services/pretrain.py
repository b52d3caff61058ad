"""Image-domain and box-domain pre-training.

The box-domain stage runs two branches over two views of each image. The
backbone is shared and frozen; the online neck, head and projection are
trained with SGD while the momentum copy follows them by EMA after every
step. Class labels never reach this module: datasets are stripped with
:meth:`DatasetManifest.unlabeled` on entry.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..assign import AssignmentResult, PseudoClassMap, kmeans, sample_predictions
from ..augment import apply_to_image, make_view, pad_to_stride, sample_transform
from ..checkpoint import (
    MANIFEST_FILENAME,
    CheckpointManifest,
    load_checkpoint,
    save_checkpoint,
)
from ..config import RunConfig
from ..data import DatasetManifest
from ..geometry import clip_boxes_tensor
from ..losses import (
    MOMENTUM,
    ONLINE,
    EmbeddingSet,
    NonFiniteLossError,
    contrastive_loss,
    pseudo_class_loss,
    pseudo_class_targets,
    regression_loss,
    siamese_loss,
    total_loss,
)
from ..netcore import (
    BACKBONE_CHANNELS,
    TOTAL_STRIDE,
    Backbone,
    DetectorNet,
    NetcoreError,
    ParamSet,
    RegOutput,
    backward,
    extract_box_features,
    image_to_tensor,
    init_module,
    project,
    roi_pool,
    sgd_step,
)
from ..plugins import AssignRequest, FlavorContribution, PriorGrid
from ..proposals import ProposalSet
from ..utils.metrics import MetricsWriter, StepMetrics

logger = logging.getLogger(__name__)

BACKBONE_PREFIX = "backbone."
PROJECTION_PREFIX = "projection."
BRANCH_PREFIXES = ("neck.", "head.")
ONLINE_PREFIX = "online."
MOMENTUM_PREFIX = "momentum."
PSEUDO_WEIGHT = "head.pseudo_cls.weight"

# rng stream ids, combined with the run seed
IMAGE_ORDER_STREAM = 10
IMAGE_STEP_STREAM = 11
BOX_ORDER_STREAM = 20
BOX_STEP_STREAM = 21


class TrainingError(RuntimeError):
    """Raised when a training run cannot start or has to abort."""


# ---------------------------------------------------------------------------
# Shared detector plumbing (also used by fine-tuning)
# ---------------------------------------------------------------------------


def build_net(
    config: RunConfig,
    flavor: FlavorContribution,
    *,
    pseudo_classes: int | None = None,
    seed: int | None = None,
) -> DetectorNet:
    return DetectorNet(
        config.model,
        dense=flavor.dense,
        priors_per_location=flavor.priors_per_location,
        pseudo_classes=pseudo_classes,
        seed=config.seed if seed is None else seed,
    )


@dataclass(slots=True)
class ViewOutput:
    """Pyramid, priors and decoded predictions for one image."""

    levels: list[torch.Tensor]
    grid: PriorGrid
    priors: torch.Tensor
    reg: RegOutput
    image_size: tuple[int, int]

    def clipped_boxes(self, index: np.ndarray | None = None) -> torch.Tensor:
        boxes = self.reg.boxes.detach()
        if index is not None:
            boxes = boxes[torch.as_tensor(index, dtype=torch.long)]
        return clip_boxes_tensor(boxes, *self.image_size)


def regress_view(
    backbone_net: DetectorNet,
    branch: DetectorNet,
    image: np.ndarray,
    config: RunConfig,
    flavor: FlavorContribution,
    *,
    backbone_grad: bool,
) -> ViewOutput:
    """Backbone of ``backbone_net`` followed by the neck and head of ``branch``."""

    tensor = image_to_tensor(pad_to_stride(image, TOTAL_STRIDE))
    size = (int(tensor.shape[-1]), int(tensor.shape[-2]))
    with torch.set_grad_enabled(backbone_grad and torch.is_grad_enabled()):
        feats = backbone_net.backbone(tensor)
    levels = branch.neck(feats)
    shapes = [(int(fmap.shape[-2]), int(fmap.shape[-1])) for fmap in levels]
    grid = flavor.prior_boxes(
        level_shapes=shapes, strides=branch.strides, image_size=size, config=config
    )
    priors = torch.as_tensor(grid.boxes, dtype=levels[0].dtype)
    return ViewOutput(levels, grid, priors, branch.regress(levels, priors), size)


def assign_view(
    out: ViewOutput,
    targets: np.ndarray,
    config: RunConfig,
    flavor: FlavorContribution,
    *,
    pseudo: PseudoClassMap | None = None,
    class_scores: np.ndarray | None = None,
) -> AssignmentResult:
    request = AssignRequest(
        priors=out.grid,
        predictions=out.reg.boxes.detach().numpy().astype(np.float64),
        targets=np.asarray(targets, dtype=np.float64).reshape(-1, 4),
        image_size=out.image_size,
        pseudo=pseudo,
        class_scores=class_scores,
    )
    return flavor.assign(request, config)


def take(assigned: AssignmentResult, index: np.ndarray) -> AssignmentResult:
    """Restrict an assignment to the rows in ``index``."""

    return AssignmentResult(
        assigned.labels[index], assigned.matched[index], assigned.num_proposals
    )


def embed_boxes(
    net: DetectorNet, out: ViewOutput, index: np.ndarray, *, normalize: bool
) -> torch.Tensor:
    features = extract_box_features(net, out.levels, out.clipped_boxes(index))
    return project(net.projection, features, normalize=normalize)


# ---------------------------------------------------------------------------
# Image-domain stage
# ---------------------------------------------------------------------------


class SiameseNet(nn.Module):
    """Backbone with a pooled projector and a predictor head."""

    def __init__(self, hidden_dim: int, seed: int) -> None:
        super().__init__()
        width = BACKBONE_CHANNELS[-1]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.backbone = Backbone()
            self.projector = nn.Sequential(
                nn.Linear(width, hidden_dim),
                nn.ReLU(),
                nn.Linear(hidden_dim, hidden_dim),
            )
            self.predictor = nn.Sequential(
                nn.Linear(hidden_dim, hidden_dim // 2),
                nn.ReLU(),
                nn.Linear(hidden_dim // 2, hidden_dim),
            )
            self.apply(init_module)

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        pooled = self.backbone(image)[-1].mean(dim=(2, 3))
        z = self.projector(pooled)
        return z, self.predictor(z)


def _image_view(
    image: np.ndarray, rng: np.random.Generator, config: RunConfig
) -> torch.Tensor:
    height, width = image.shape[:2]
    view = apply_to_image(image, sample_transform(rng, config.aug, (width, height)))
    return image_to_tensor(pad_to_stride(view, TOTAL_STRIDE))


def image_domain_pretrain(
    dataset: DatasetManifest,
    config: RunConfig,
    *,
    metrics: MetricsWriter | None = None,
) -> ParamSet:
    """Siamese whole-image pre-training; returns the backbone parameters only.

    Each image yields two augmented views. Both pass through the shared
    backbone and projector, a predictor runs on top, and the symmetrized
    negative cosine between each prediction and the other view's detached
    projection is minimized.
    """

    dataset = dataset.unlabeled()
    cfg = config.image
    net = SiameseNet(cfg.hidden_dim, seed=config.seed)
    params = ParamSet.from_module(net)
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(
            [config.seed, IMAGE_ORDER_STREAM, epoch]
        ).permutation(len(dataset))
        epoch_loss = 0.0
        batches = range(0, len(order), cfg.batch_size)
        for batch_index, start in enumerate(batches):
            rng = np.random.default_rng(
                [config.seed, IMAGE_STEP_STREAM, epoch, batch_index]
            )
            params.zero_grad()
            outputs: list[tuple[torch.Tensor, ...]] = []
            for index in order[start : start + cfg.batch_size]:
                image = dataset.load_image(dataset.images[int(index)])
                z1, p1 = net(_image_view(image, rng, config))
                z2, p2 = net(_image_view(image, rng, config))
                outputs.append((p1, p2, z1, z2))
            p1, p2, z1, z2 = (torch.cat(parts) for parts in zip(*outputs))
            loss = siamese_loss(p1, p2, z1, z2)
            if not bool(torch.isfinite(loss)):
                raise TrainingError(f"image-domain loss is not finite at step {step}")
            backward(loss)
            sgd_step(params, cfg.lr, cfg.weight_decay)
            value = float(loss.detach())
            epoch_loss += value
            if metrics is not None:
                metrics.write(StepMetrics(step, value, value, 0.0, cfg.lr))
            step += 1
        logger.info(
            "image epoch %d/%d: mean loss %.4f",
            epoch + 1,
            cfg.epochs,
            epoch_loss / max(1, len(batches)),
        )
    return ParamSet.from_module(net.backbone, prefix=BACKBONE_PREFIX)


def backbone_manifest(
    backbone: ParamSet, config: RunConfig, *, step: int = 0
) -> CheckpointManifest:
    return CheckpointManifest(
        kind="image",
        arrays=backbone.to_arrays(),
        config=config.to_flat_dict(),
        step=step,
        epoch=config.image.epochs,
        rng_state={"seed": config.seed},
    )


def backbone_arrays(manifest: CheckpointManifest) -> dict[str, np.ndarray]:
    """Backbone arrays named as in :class:`DetectorNet`, from any checkpoint kind."""

    if manifest.kind == "image":
        source = manifest.arrays
    elif manifest.kind == "box":
        source = manifest.select(ONLINE_PREFIX)
    else:
        raise TrainingError(f"a '{manifest.kind}' checkpoint holds no backbone")
    return {
        name: value
        for name, value in source.items()
        if name.startswith(BACKBONE_PREFIX)
    }


def load_backbone(net: DetectorNet, manifest: CheckpointManifest) -> None:
    try:
        net.params().subset([BACKBONE_PREFIX]).load_arrays(backbone_arrays(manifest))
    except NetcoreError as exc:
        raise TrainingError(f"cannot load backbone: {exc}") from exc


# ---------------------------------------------------------------------------
# Pseudo classes for set-prediction flavors
# ---------------------------------------------------------------------------


def build_pseudo_classes(
    net: DetectorNet,
    dataset: DatasetManifest,
    proposals: Mapping[str, ProposalSet],
    config: RunConfig,
) -> dict[str, PseudoClassMap]:
    """Cluster backbone features of every proposal into pseudo classes.

    Proposals are pooled from the finest backbone map of the unaugmented
    image. ``k`` is capped by the number of proposals available.
    """

    single_level = dataclasses.replace(config.model, level_split_area=math.inf)
    rows: list[np.ndarray] = []
    owners: list[tuple[str, int]] = []
    with torch.no_grad():
        for record in dataset.images:
            props = proposals.get(record.id)
            if props is None or not props.boxes:
                continue
            image = dataset.load_image(record)
            tensor = image_to_tensor(pad_to_stride(image, TOTAL_STRIDE))
            finest = net.backbone(tensor)[0]
            boxes = torch.as_tensor(props.as_array(), dtype=finest.dtype)
            pooled = roi_pool([finest], boxes, net.strides[:1], single_level)
            rows.append(pooled.numpy())
            owners.append((record.id, len(props)))
    if not rows:
        logger.warning("no proposals to cluster; pseudo classes disabled")
        return {}
    features = np.concatenate(rows).astype(np.float64)
    k = min(config.assign.pseudo_classes, features.shape[0])
    clusters = kmeans(
        features, k, seed=config.seed, max_iters=config.assign.kmeans_iters
    )
    logger.info("clustered %d proposals into %d pseudo classes", len(clusters), k)
    maps: dict[str, PseudoClassMap] = {}
    start = 0
    for image_id, count in owners:
        maps[image_id] = clusters.slice(start, start + count)
        start += count
    return maps


# ---------------------------------------------------------------------------
# Box-domain stage
# ---------------------------------------------------------------------------


@dataclass(slots=True)
class BoxSample:
    image: np.ndarray
    proposals: ProposalSet
    pseudo: PseudoClassMap | None = None


def momentum_copy(net: DetectorNet) -> DetectorNet:
    """Independent copy of ``net`` that never collects gradients."""

    twin = copy.deepcopy(net)
    for param in twin.parameters():
        param.requires_grad_(False)
        param.grad = None
    return twin


def ema_prefixes(config: RunConfig) -> tuple[str, ...]:
    if config.ema.include_projection:
        return (*BRANCH_PREFIXES, PROJECTION_PREFIX)
    return BRANCH_PREFIXES


def ema_update(params_q: ParamSet, params_k: ParamSet, m: float) -> None:
    """``k <- m * k + (1 - m) * q`` for every parameter of ``params_k``."""

    if not 0.0 <= m < 1.0:
        raise TrainingError(f"EMA momentum must lie in [0, 1), got {m}")
    if sorted(params_q.names()) != sorted(params_k.names()):
        missing = sorted(set(params_q.names()) ^ set(params_k.names()))
        raise TrainingError(f"EMA parameter names differ: {', '.join(missing)}")
    for name, k in params_k.items():
        if tuple(params_q[name].shape) != tuple(k.shape):
            raise TrainingError(f"EMA shape mismatch for '{name}'")
    with torch.no_grad():
        for name, k in params_k.items():
            k.mul_(m).add_(params_q[name].detach(), alpha=1.0 - m)


def _offset_labels(labels: np.ndarray, offset: int) -> np.ndarray:
    return np.where(labels > 0, labels + offset, labels)


def _mean(terms: Sequence[torch.Tensor]) -> torch.Tensor | None:
    return torch.stack(terms).mean() if terms else None


def box_domain_step(
    net_q: DetectorNet,
    net_k: DetectorNet,
    batch: Sequence[BoxSample],
    config: RunConfig,
    *,
    flavor: FlavorContribution,
    rng: np.random.Generator,
    step: int = 0,
) -> StepMetrics:
    """One optimizer step of box-domain pre-training followed by the EMA update.

    Proposal indices are offset per image so that boxes from different
    images never count as positives of each other. Images without
    proposals are skipped and counted.
    """

    loss_cfg = config.loss
    cap = flavor.sample_cap(config)
    train_backbone = not config.pretrain.freeze_backbone
    online = net_q.params()
    online.zero_grad()

    online_sets: list[EmbeddingSet] = []
    momentum_sets: list[EmbeddingSet] = []
    reg_terms: list[torch.Tensor] = []
    cls_terms: list[torch.Tensor] = []
    positives = skipped = offset = 0
    for sample in batch:
        if not sample.proposals.boxes:
            skipped += 1
            continue
        source = (sample.proposals.width, sample.proposals.height)
        view1 = make_view(
            sample.image, sample.proposals, sample_transform(rng, config.aug, source)
        )
        view2 = make_view(
            sample.image, sample.proposals, sample_transform(rng, config.aug, source)
        )

        out_q = regress_view(
            net_q, net_q, view1.image, config, flavor, backbone_grad=train_backbone
        )
        scores_q = None
        if out_q.reg.pseudo_logits is not None:
            scores_q = F.softmax(out_q.reg.pseudo_logits.detach(), dim=1).numpy()
        assigned_q = assign_view(
            out_q,
            view1.proposals.as_array(),
            config,
            flavor,
            pseudo=sample.pseudo,
            class_scores=scores_q,
        )
        idx_q = sample_predictions(assigned_q, cap, rng)
        z_q = embed_boxes(net_q, out_q, idx_q, normalize=loss_cfg.normalize_embeddings)

        with torch.no_grad():
            out_k = regress_view(
                net_q, net_k, view2.image, config, flavor, backbone_grad=False
            )
            scores_k = None
            if out_k.reg.pseudo_logits is not None:
                scores_k = F.softmax(out_k.reg.pseudo_logits, dim=1).numpy()
            assigned_k = assign_view(
                out_k,
                view2.proposals.as_array(),
                config,
                flavor,
                pseudo=sample.pseudo,
                class_scores=scores_k,
            )
            idx_k = sample_predictions(assigned_k, cap, rng)
            z_k = embed_boxes(
                net_k, out_k, idx_k, normalize=loss_cfg.normalize_embeddings
            )

        online_sets.append(
            EmbeddingSet(z_q, _offset_labels(assigned_q.labels[idx_q], offset), ONLINE)
        )
        momentum_sets.append(
            EmbeddingSet(
                z_k, _offset_labels(assigned_k.labels[idx_k], offset), MOMENTUM
            )
        )
        offset += len(sample.proposals)

        kept = take(assigned_q, idx_q)
        positives += int(kept.positives.size)
        index = torch.as_tensor(idx_q, dtype=torch.long)
        reg = regression_loss(
            out_q.reg.boxes[index], kept, loss_cfg, priors=out_q.priors[index]
        )
        if not reg.empty:
            reg_terms.append(reg.loss)
        if out_q.reg.pseudo_logits is not None and sample.pseudo is not None:
            targets = pseudo_class_targets(
                assigned_q, sample.pseudo.labels, sample.pseudo.k
            )
            cls_terms.append(
                pseudo_class_loss(out_q.reg.pseudo_logits, torch.as_tensor(targets))
            )

    pairs = 0
    con_loss: torch.Tensor = torch.zeros(())
    if online_sets:
        con = contrastive_loss(
            EmbeddingSet.concat(online_sets, ONLINE),
            EmbeddingSet.concat(momentum_sets, MOMENTUM),
            loss_cfg,
        )
        con_loss, pairs = con.loss, con.pairs
    reg_loss = _mean(reg_terms)
    if reg_loss is None:
        reg_loss = torch.zeros(())
    cls_loss = _mean(cls_terms)
    try:
        total = total_loss(con_loss, reg_loss, loss_cfg, cls_loss)
    except NonFiniteLossError as exc:
        raise TrainingError(f"step {step}: {exc}") from exc

    backward(total)
    sgd_step(online, config.pretrain.lr, config.pretrain.weight_decay)
    prefixes = ema_prefixes(config)
    ema_update(online.subset(prefixes), net_k.params().subset(prefixes), config.ema.m)

    logger.debug(
        "box step %d: total %.4f con %.4f reg %.4f positives %d pairs %d",
        step,
        float(total.detach()),
        float(con_loss.detach()),
        float(reg_loss.detach()),
        positives,
        pairs,
    )
    return StepMetrics(
        step=step,
        loss_total=float(total.detach()),
        loss_con=float(con_loss.detach()),
        loss_reg=float(reg_loss.detach()),
        lr=config.pretrain.lr,
        pos_count=positives,
        skipped_images=skipped,
        loss_cls=0.0 if cls_loss is None else float(cls_loss.detach()),
        pairs=pairs,
    )


def box_manifest(
    net_q: DetectorNet,
    net_k: DetectorNet,
    config: RunConfig,
    *,
    step: int,
    epoch: int,
) -> CheckpointManifest:
    """Online tree (backbone included) plus the momentum neck, head, projection."""

    momentum_trees = (*BRANCH_PREFIXES, PROJECTION_PREFIX)
    arrays = net_q.params().to_arrays(ONLINE_PREFIX)
    arrays.update(net_k.params().subset(momentum_trees).to_arrays(MOMENTUM_PREFIX))
    return CheckpointManifest(
        kind="box",
        arrays=arrays,
        config=config.to_flat_dict(),
        flavor=config.flavor,
        step=step,
        epoch=epoch,
        rng_state={"seed": config.seed, "next_epoch": epoch},
    )


def restore_branches(
    net_q: DetectorNet, net_k: DetectorNet, manifest: CheckpointManifest
) -> None:
    try:
        net_q.params().load_arrays(manifest.arrays, ONLINE_PREFIX)
        net_k.params().subset((*BRANCH_PREFIXES, PROJECTION_PREFIX)).load_arrays(
            manifest.arrays, MOMENTUM_PREFIX
        )
    except NetcoreError as exc:
        raise TrainingError(f"cannot resume from checkpoint: {exc}") from exc


def pseudo_classes_in(arrays: Mapping[str, np.ndarray]) -> int | None:
    """Pseudo-class count of a saved head, ``None`` when it has no such layer."""

    weight = arrays.get(PSEUDO_WEIGHT)
    return None if weight is None else int(weight.shape[0]) - 1


def run_box_pretrain(
    dataset: DatasetManifest,
    proposals: Mapping[str, ProposalSet],
    config: RunConfig,
    *,
    flavor: FlavorContribution,
    backbone: CheckpointManifest,
    out_dir: Path,
    resume: bool = False,
    metrics: MetricsWriter | None = None,
) -> CheckpointManifest:
    """Epoch loop over :func:`box_domain_step` with periodic checkpoints.

    Batch order and augmentation draw from rng streams keyed by
    ``(seed, epoch, batch)``, so resuming at a saved epoch replays the
    remaining trajectory exactly. Checkpoints are written only after
    complete epochs; an aborted run leaves the last one in place.
    """

    dataset = dataset.unlabeled()
    missing = [record.id for record in dataset.images if record.id not in proposals]
    if missing:
        raise TrainingError(f"no proposals for images: {', '.join(missing[:5])}")

    pseudo_maps: dict[str, PseudoClassMap] = {}
    k: int | None = None
    if not flavor.dense:
        clustering_net = build_net(config, flavor)
        load_backbone(clustering_net, backbone)
        pseudo_maps = build_pseudo_classes(clustering_net, dataset, proposals, config)
        k = next(iter(pseudo_maps.values())).k if pseudo_maps else None

    net_q = build_net(config, flavor, pseudo_classes=k)
    load_backbone(net_q, backbone)
    if config.pretrain.freeze_backbone:
        net_q.params().freeze(BACKBONE_PREFIX)
    net_k = momentum_copy(net_q)

    start_epoch = step = 0
    if resume and (out_dir / MANIFEST_FILENAME).exists():
        previous = load_checkpoint(out_dir, kind="box")
        if previous.flavor != config.flavor:
            raise TrainingError(
                f"checkpoint at {out_dir} was trained with flavor '{previous.flavor}'"
            )
        restore_branches(net_q, net_k, previous)
        start_epoch, step = previous.epoch, previous.step
        logger.info("resuming box-domain run at epoch %d, step %d", start_epoch, step)
    if resume and metrics is not None:
        dropped = metrics.rewind(step)
        if dropped:
            logger.info("dropped %d metrics rows past step %d", dropped, step)

    epochs = config.box_epochs
    batch_size = config.pretrain.batch_size
    manifest = box_manifest(net_q, net_k, config, step=step, epoch=start_epoch)
    for epoch in range(start_epoch, epochs):
        order = np.random.default_rng(
            [config.seed, BOX_ORDER_STREAM, epoch]
        ).permutation(len(dataset))
        totals = {"con": 0.0, "reg": 0.0, "steps": 0, "skipped": 0}
        for batch_index, start in enumerate(range(0, len(order), batch_size)):
            batch = []
            for index in order[start : start + batch_size]:
                record = dataset.images[int(index)]
                batch.append(
                    BoxSample(
                        dataset.load_image(record),
                        proposals[record.id],
                        pseudo_maps.get(record.id),
                    )
                )
            rng = np.random.default_rng(
                [config.seed, BOX_STEP_STREAM, epoch, batch_index]
            )
            try:
                result = box_domain_step(
                    net_q, net_k, batch, config, flavor=flavor, rng=rng, step=step
                )
            except TrainingError:
                logger.error(
                    "box-domain run aborted at step %d; last checkpoint kept", step
                )
                raise
            if metrics is not None:
                metrics.write(result)
            step += 1
            totals["con"] += result.loss_con
            totals["reg"] += result.loss_reg
            totals["steps"] += 1
            totals["skipped"] += result.skipped_images
        steps = max(1, totals["steps"])
        logger.info(
            "box epoch %d/%d: con %.4f reg %.4f skipped %d",
            epoch + 1,
            epochs,
            totals["con"] / steps,
            totals["reg"] / steps,
            totals["skipped"],
        )
        manifest = box_manifest(net_q, net_k, config, step=step, epoch=epoch + 1)
        if (epoch + 1) % config.pretrain.checkpoint_every == 0 or epoch + 1 == epochs:
            save_checkpoint(out_dir, manifest)
    if start_epoch >= epochs:
        save_checkpoint(out_dir, manifest)
    return manifest


def load_for_finetune(
    manifest: CheckpointManifest,
    config: RunConfig,
    num_classes: int,
    *,
    flavor: FlavorContribution,
    seed: int | None = None,
) -> DetectorNet:
    """Detector initialized from the online branch, except the projection.

    The projection is re-drawn and a fresh classifier is attached.
    """

    if manifest.kind != "box":
        raise TrainingError(f"expected a 'box' checkpoint, found '{manifest.kind}'")
    if manifest.flavor is not None and manifest.flavor != config.flavor:
        raise TrainingError(
            f"checkpoint flavor '{manifest.flavor}' does not match '{config.flavor}'"
        )
    seed = config.seed if seed is None else seed
    arrays = manifest.select(ONLINE_PREFIX)
    net = build_net(config, flavor, pseudo_classes=pseudo_classes_in(arrays), seed=seed)
    try:
        net.params().subset([BACKBONE_PREFIX, *BRANCH_PREFIXES]).load_arrays(arrays)
    except NetcoreError as exc:
        raise TrainingError(f"cannot load pre-trained weights: {exc}") from exc
    net.reset_projection(seed + 1)
    net.attach_classifier(num_classes, seed + 2)
    return net


def online_net(
    manifest: CheckpointManifest, config: RunConfig, *, flavor: FlavorContribution
) -> DetectorNet:
    """The complete online branch of a box checkpoint, projection included."""

    arrays = manifest.select(ONLINE_PREFIX)
    net = build_net(config, flavor, pseudo_classes=pseudo_classes_in(arrays))
    try:
        net.params().load_arrays(arrays)
    except NetcoreError as exc:
        raise TrainingError(f"cannot load online branch: {exc}") from exc
    return net


__all__ = [
    "BoxSample",
    "SiameseNet",
    "TrainingError",
    "ViewOutput",
    "assign_view",
    "backbone_arrays",
    "backbone_manifest",
    "box_domain_step",
    "box_manifest",
    "build_net",
    "build_pseudo_classes",
    "ema_prefixes",
    "ema_update",
    "embed_boxes",
    "image_domain_pretrain",
    "load_backbone",
    "load_for_finetune",
    "momentum_copy",
    "online_net",
    "pseudo_classes_in",
    "regress_view",
    "restore_branches",
    "run_box_pretrain",
    "take",
]
