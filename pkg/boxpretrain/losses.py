"""Box-level contrastive loss, coordinate regression losses and their total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .assign import AssignmentResult
from .config import LossConfig
from .geometry import BACKGROUND, IGNORE, aligned_iou_tensor, encode_deltas_tensor

ONLINE = "online"
MOMENTUM = "momentum"


class LossError(RuntimeError):
    """Base error for loss evaluation."""


class NonFiniteLossError(LossError):
    """Raised when a loss component is NaN or infinite."""


@dataclass(slots=True)
class EmbeddingSet:
    """Projected box embeddings with their assignment labels.

    ``labels`` uses ``BACKGROUND`` (0), ``IGNORE`` (-1) or a proposal index.
    """

    z: torch.Tensor
    labels: torch.Tensor
    branch: str = ONLINE

    def __post_init__(self) -> None:
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.z.dim() != 2 or self.z.shape[0] != self.labels.shape[0]:
            raise LossError(
                f"embeddings {tuple(self.z.shape)} do not match "
                f"{self.labels.shape[0]} labels"
            )
        if self.branch not in (ONLINE, MOMENTUM):
            raise LossError(f"unknown branch tag '{self.branch}'")

    def __len__(self) -> int:
        return int(self.z.shape[0])

    def without_ignored(self) -> "EmbeddingSet":
        keep = self.labels != IGNORE
        return EmbeddingSet(self.z[keep], self.labels[keep], self.branch)

    @classmethod
    def concat(cls, parts: list["EmbeddingSet"], branch: str) -> "EmbeddingSet":
        if not parts:
            raise LossError("cannot concatenate an empty list of embedding sets")
        return cls(
            torch.cat([part.z for part in parts]),
            torch.cat([part.labels for part in parts]),
            branch,
        )


@dataclass(slots=True)
class ContrastiveResult:
    loss: torch.Tensor
    pairs: int
    queries: int
    skipped_queries: int


@dataclass(slots=True)
class RegressionResult:
    loss: torch.Tensor
    positives: int

    @property
    def empty(self) -> bool:
        return self.positives == 0


def contrastive_loss(
    z1: EmbeddingSet, z2: EmbeddingSet, cfg: LossConfig
) -> ContrastiveResult:
    """Box-level InfoNCE over online queries.

    Queries are the labelled rows of ``z1``. For a query with index ``i``
    the positives are the other ``z1`` rows labelled ``i`` (plus matching
    ``z2`` rows when ``cfg.positives_from_momentum``) and the negatives are
    every row of ``z1`` and ``z2`` with a different label. Each
    (query, positive) pair contributes
    ``-log(e^{s+} / (e^{s+} + sum e^{s-}))`` with ``s = q . z / tau``.
    Momentum rows never carry gradient.
    """

    online = z1.without_ignored()
    momentum = z2.without_ignored()
    zero = online.z.sum() * 0.0
    is_query = online.labels > 0
    if not bool(is_query.any()):
        return ContrastiveResult(zero, 0, 0, 0)

    n_online = len(online)
    keys = torch.cat([online.z, momentum.z.detach().to(online.z.dtype)])
    key_labels = torch.cat([online.labels, momentum.labels])
    query_rows = torch.nonzero(is_query).squeeze(1)
    queries = online.z[query_rows]
    query_labels = online.labels[query_rows]

    sims = queries @ keys.T / cfg.tau
    same = query_labels[:, None] == key_labels[None, :]

    positive = same.clone()
    if not cfg.positives_from_momentum:
        positive[:, n_online:] = False
    positive[torch.arange(query_rows.numel()), query_rows] = False

    negative = ~same
    if cfg.exclude_background_negatives:
        negative &= (key_labels != BACKGROUND)[None, :]

    has_negative = negative.any(dim=1)
    masked = sims.masked_fill(~negative, float("-inf"))
    masked = torch.where(has_negative[:, None], masked, torch.zeros_like(sims))
    neg_lse = torch.where(
        has_negative,
        torch.logsumexp(masked, dim=1),
        torch.full_like(has_negative, float("-inf"), dtype=sims.dtype),
    )
    terms = torch.logaddexp(sims, neg_lse[:, None]) - sims
    terms = torch.where(positive, terms, torch.zeros_like(terms))

    pairs = int(positive.sum())
    per_query = positive.sum(dim=1)
    skipped = int((per_query == 0).sum())
    total = terms.sum()
    if cfg.reduction == "sum" or pairs == 0:
        loss = total if pairs else zero
    elif cfg.reduction == "queries":
        with_pos = per_query > 0
        loss = (terms.sum(dim=1)[with_pos] / per_query[with_pos]).mean()
    else:
        loss = total / pairs
    return ContrastiveResult(loss, pairs, int(query_rows.numel()), skipped)


def regression_loss(
    pred_boxes: torch.Tensor,
    assigned: AssignmentResult,
    cfg: LossConfig,
    *,
    priors: torch.Tensor | None = None,
) -> RegressionResult:
    """L1 on encoded deltas plus ``1 - IoU``, averaged over positives.

    Deltas are encoded against ``priors`` when given, else against the
    assigned proposal itself.
    """

    positives = assigned.positives
    if positives.size == 0:
        return RegressionResult(pred_boxes.sum() * 0.0, 0)
    index = torch.as_tensor(positives, dtype=torch.long)
    pred = pred_boxes[index]
    target = torch.as_tensor(assigned.matched[positives], dtype=pred.dtype)
    anchor = target if priors is None else priors[index].to(pred.dtype)

    per_box = pred.new_zeros(pred.shape[0])
    if cfg.l1_weight:
        delta = encode_deltas_tensor(anchor, pred) - encode_deltas_tensor(
            anchor, target
        )
        per_box = per_box + cfg.l1_weight * delta.abs().sum(dim=1)
    if cfg.iou_weight:
        per_box = per_box + cfg.iou_weight * (1.0 - aligned_iou_tensor(pred, target))
    return RegressionResult(per_box.mean(), int(positives.size))


def pseudo_class_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over pseudo classes plus the trailing no-object class."""

    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits, torch.as_tensor(targets, dtype=torch.long))


def pseudo_class_targets(
    assigned: AssignmentResult, pseudo_labels: np.ndarray, k: int
) -> np.ndarray:
    """Cluster id of the matched proposal, ``k`` (no object) elsewhere."""

    targets = np.full(len(assigned), k, dtype=np.int64)
    positives = assigned.positives
    targets[positives] = pseudo_labels[assigned.labels[positives] - 1]
    return targets


def negative_cosine(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Mean negative cosine similarity with a stop-gradient on ``z``."""

    z = z.detach()
    return -(F.normalize(p, dim=1) * F.normalize(z, dim=1)).sum(dim=1).mean()


def siamese_loss(
    p1: torch.Tensor, p2: torch.Tensor, z1: torch.Tensor, z2: torch.Tensor
) -> torch.Tensor:
    return negative_cosine(p1, z2) / 2 + negative_cosine(p2, z1) / 2


def _finite(name: str, value: torch.Tensor | float) -> torch.Tensor:
    tensor = value
    if not torch.is_tensor(tensor):
        tensor = torch.tensor(float(tensor), dtype=torch.float64)
    if not bool(torch.isfinite(tensor).all()):
        raise NonFiniteLossError(f"{name} loss is not finite: {tensor.tolist()}")
    return tensor


def total_loss(
    con: torch.Tensor | float,
    reg: torch.Tensor | float,
    cfg: LossConfig,
    cls: torch.Tensor | float | None = None,
) -> torch.Tensor:
    """``con_weight * con + reg_weight * reg`` (+ ``cls_weight * cls``)."""

    con_t = _finite("contrastive", con)
    reg_t = _finite("regression", reg)
    total = cfg.con_weight * con_t + cfg.reg_weight * reg_t
    if cls is not None:
        total = total + cfg.cls_weight * _finite("classification", cls)
    return total


__all__ = [
    "ContrastiveResult",
    "EmbeddingSet",
    "LossError",
    "MOMENTUM",
    "NonFiniteLossError",
    "ONLINE",
    "RegressionResult",
    "contrastive_loss",
    "negative_cosine",
    "pseudo_class_loss",
    "pseudo_class_targets",
    "regression_loss",
    "siamese_loss",
    "total_loss",
]
