"""Built-in point flavor: one prior per location, center-sampling assignment."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from boxpretrain.assign import (
    AssignmentResult,
    assign_center,
    grid_locations,
    split_scale_ranges,
)
from boxpretrain.config import RunConfig
from boxpretrain.plugins import (
    AssignRequest,
    FlavorContribution,
    PriorGrid,
    hookimpl,
)

FLAVOR_ID = "point"


def point_priors(
    *,
    level_shapes: Sequence[tuple[int, int]],
    strides: Sequence[int],
    image_size: tuple[int, int],
    config: RunConfig,
) -> PriorGrid:
    points, levels = grid_locations(level_shapes, strides)
    side = config.model.prior_scale * np.asarray(strides, dtype=np.float64)[levels]
    boxes = np.column_stack([points, side, side])
    return PriorGrid(boxes, levels, len(strides))


def assign_by_center(request: AssignRequest, config: RunConfig) -> AssignmentResult:
    ranges = split_scale_ranges(config.assign.scale_split, request.priors.num_levels)
    return assign_center(
        request.priors.points, request.priors.levels, request.targets, ranges
    )


@hookimpl
def detector_flavors(config: RunConfig) -> tuple[FlavorContribution, ...]:
    """Expose the point-based flavor as a plugin contribution."""

    contribution = FlavorContribution(
        flavor_id=FLAVOR_ID,
        description="Anchor-free points, inside-box assignment per scale range",
        dense=True,
        priors_per_location=1,
        prior_boxes=point_priors,
        assign=assign_by_center,
        sample_cap=lambda cfg: cfg.assign.dense_cap,
    )
    return (contribution,)


__all__ = ["FLAVOR_ID", "assign_by_center", "detector_flavors", "point_priors"]
