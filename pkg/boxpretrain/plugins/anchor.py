"""Built-in anchor flavor: several priors per location, max-IoU assignment."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from boxpretrain.assign import AssignmentResult, assign_iou, grid_locations
from boxpretrain.config import RunConfig
from boxpretrain.plugins import (
    AssignRequest,
    FlavorContribution,
    PriorGrid,
    hookimpl,
)

FLAVOR_ID = "anchor"


def anchor_priors(
    *,
    level_shapes: Sequence[tuple[int, int]],
    strides: Sequence[int],
    image_size: tuple[int, int],
    config: RunConfig,
) -> PriorGrid:
    """``len(anchor_ratios)`` boxes of side ``prior_scale * stride`` per cell.

    A ratio ``r`` is height over width at constant area.
    """

    points, levels = grid_locations(level_shapes, strides)
    ratios = config.model.anchor_ratios
    stride_of = np.asarray(strides, dtype=np.float64)[levels]
    rows = []
    for ratio in ratios:
        side = config.model.prior_scale * stride_of
        width = side / math.sqrt(ratio)
        height = side * math.sqrt(ratio)
        rows.append(np.column_stack([points, width, height]))
    # interleave so each location holds its priors contiguously
    boxes = np.stack(rows, axis=1).reshape(-1, 4)
    return PriorGrid(boxes, np.repeat(levels, len(ratios)), len(strides))


def assign_by_iou(request: AssignRequest, config: RunConfig) -> AssignmentResult:
    return assign_iou(
        request.priors.boxes,
        request.targets,
        config.assign.pos_iou,
        config.assign.neg_iou,
        low_quality_rescue=config.assign.low_quality_rescue,
    )


@hookimpl
def detector_flavors(config: RunConfig) -> tuple[FlavorContribution, ...]:
    """Expose the anchor-based flavor as a plugin contribution."""

    contribution = FlavorContribution(
        flavor_id=FLAVOR_ID,
        description="Anchor boxes per location, IoU-threshold assignment",
        dense=True,
        priors_per_location=len(config.model.anchor_ratios),
        prior_boxes=anchor_priors,
        assign=assign_by_iou,
        sample_cap=lambda cfg: cfg.assign.dense_cap,
    )
    return (contribution,)


__all__ = ["FLAVOR_ID", "anchor_priors", "assign_by_iou", "detector_flavors"]
