"""Type definitions for detector-flavor plugin contracts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Protocol, Sequence

import numpy as np

if TYPE_CHECKING:  # pragma: no cover - type check only
    from ..assign import AssignmentResult, PseudoClassMap
    from ..config import RunConfig


@dataclass(slots=True, frozen=True)
class PriorGrid:
    """Reference boxes the regression branch predicts offsets for.

    Dense flavors emit one row per (level, y, x, prior); set-prediction
    flavors emit one row per query.
    """

    boxes: np.ndarray
    levels: np.ndarray
    num_levels: int

    def __len__(self) -> int:
        return int(self.boxes.shape[0])

    @property
    def points(self) -> np.ndarray:
        return self.boxes[:, :2]


@dataclass(slots=True)
class AssignRequest:
    """Everything an assignment rule may look at for one image.

    ``targets`` are proposals during pre-training and ground truth boxes
    during fine-tuning; ``predictions`` are the decoded boxes, detached.
    """

    priors: PriorGrid
    predictions: np.ndarray
    targets: np.ndarray
    image_size: tuple[int, int]
    pseudo: "PseudoClassMap | None" = None
    class_scores: np.ndarray | None = None


class PriorFactory(Protocol):
    def __call__(
        self,
        *,
        level_shapes: Sequence[tuple[int, int]],
        strides: Sequence[int],
        image_size: tuple[int, int],
        config: "RunConfig",
    ) -> PriorGrid:  # pragma: no cover - Protocol
        """Build the prior grid for one padded image."""


class Assigner(Protocol):
    def __call__(
        self, request: AssignRequest, config: "RunConfig"
    ) -> "AssignmentResult":  # pragma: no cover - Protocol
        """Label every prior/prediction with a target index or background."""


@dataclass(slots=True, frozen=True)
class FlavorContribution:
    """Descriptor of a detector flavor provided by a plugin."""

    flavor_id: str
    description: str
    dense: bool
    priors_per_location: int
    prior_boxes: PriorFactory
    assign: Assigner
    sample_cap: Callable[["RunConfig"], int]
