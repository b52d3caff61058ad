"""Built-in query flavor: a fixed set of queries matched one-to-one."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from boxpretrain.assign import AssignmentResult, MatchingWeights, assign_hungarian
from boxpretrain.config import RunConfig
from boxpretrain.plugins import (
    AssignRequest,
    FlavorContribution,
    PriorGrid,
    hookimpl,
)

FLAVOR_ID = "query"
REFERENCE_SCALES = (0.25, 0.45, 0.7)


def query_references(image_size: tuple[int, int], num_queries: int) -> np.ndarray:
    """Reference boxes on a regular grid at a few relative sizes.

    The first ``num_queries`` boxes are taken scale by scale, row-major.
    """

    width, height = image_size
    per_scale = math.ceil(num_queries / len(REFERENCE_SCALES))
    cells = math.ceil(math.sqrt(per_scale))
    short = min(width, height)
    boxes = []
    for scale in REFERENCE_SCALES:
        side = scale * short
        for row in range(cells):
            for col in range(cells):
                cx = (col + 0.5) / cells * width
                cy = (row + 0.5) / cells * height
                boxes.append((cx, cy, side, side))
    return np.asarray(boxes[:num_queries], dtype=np.float64)


def query_priors(
    *,
    level_shapes: Sequence[tuple[int, int]],
    strides: Sequence[int],
    image_size: tuple[int, int],
    config: RunConfig,
) -> PriorGrid:
    boxes = query_references(image_size, config.model.num_queries)
    return PriorGrid(boxes, np.zeros(boxes.shape[0], dtype=np.int64), len(strides))


def assign_by_matching(request: AssignRequest, config: RunConfig) -> AssignmentResult:
    weights = MatchingWeights(
        l1=config.assign.hungarian_l1,
        iou=config.assign.hungarian_iou,
        cls=config.assign.hungarian_cls,
    )
    return assign_hungarian(
        request.predictions,
        request.targets,
        request.image_size,
        weights,
        class_scores=request.class_scores,
        pseudo=request.pseudo,
    )


@hookimpl
def detector_flavors(config: RunConfig) -> tuple[FlavorContribution, ...]:
    """Expose the query-based flavor as a plugin contribution."""

    contribution = FlavorContribution(
        flavor_id=FLAVOR_ID,
        description="Learned queries, Hungarian matching with pseudo classes",
        dense=False,
        priors_per_location=1,
        prior_boxes=query_priors,
        assign=assign_by_matching,
        sample_cap=lambda cfg: cfg.assign.query_cap,
    )
    return (contribution,)


__all__ = [
    "FLAVOR_ID",
    "assign_by_matching",
    "detector_flavors",
    "query_priors",
    "query_references",
]
