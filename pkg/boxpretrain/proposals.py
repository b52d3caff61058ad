"""Unsupervised object proposals: graph segmentation plus hierarchical merging."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from skimage.segmentation import felzenszwalb

from .config import ProposalConfig
from .geometry import BBox, box_inside, boxes_to_array, clip_to_image, nms_array

logger = logging.getLogger(__name__)

HIST_BINS = 24


class ProposalError(RuntimeError):
    """Raised when proposals cannot be generated or parsed."""


@dataclass(slots=True)
class SegmentLabelMap:
    width: int
    height: int
    labels: np.ndarray

    @property
    def region_count(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


@dataclass(slots=True)
class Region:
    id: int
    pixel_count: int
    box: BBox
    histogram: np.ndarray
    neighbors: set[int] = field(default_factory=set)


@dataclass(slots=True)
class ProposalSet:
    """Boxes of one image.

    Straight out of :func:`selective_search`, ``merges[t]`` holds the indices
    of the two boxes joined into box ``len(boxes) - len(merges) + t``.
    Filtering drops the merge record.
    """

    image_id: str
    width: int
    height: int
    boxes: list[BBox] = field(default_factory=list)
    merges: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.boxes)

    def as_array(self) -> np.ndarray:
        return boxes_to_array(self.boxes)


def _check_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] * image.shape[1] == 0:
        raise ProposalError(f"Expected a non-empty HxWx3 image, got {image.shape}")


def felzenszwalb_segment(
    image: np.ndarray, k: float, min_region_size: int, *, sigma: float = 0.8
) -> SegmentLabelMap:
    """Graph-based over-segmentation with contiguous region ids from 0."""

    _check_image(image)
    raw = felzenszwalb(
        image, scale=k, sigma=sigma, min_size=min_region_size, channel_axis=-1
    )
    _, contiguous = np.unique(raw, return_inverse=True)
    labels = contiguous.reshape(raw.shape).astype(np.int64)
    return SegmentLabelMap(width=image.shape[1], height=image.shape[0], labels=labels)


def _color_histogram(pixels: np.ndarray) -> np.ndarray:
    hists = []
    for channel in range(3):
        counts, _ = np.histogram(pixels[:, channel], bins=HIST_BINS, range=(0.0, 1.0))
        hists.append(counts / max(counts.sum(), 1))
    return np.concatenate(hists).astype(np.float64)


def _initial_regions(image: np.ndarray, seg: SegmentLabelMap) -> dict[int, Region]:
    labels = seg.labels
    regions: dict[int, Region] = {}
    flat_labels = labels.ravel()
    flat_pixels = image.reshape(-1, 3)
    ys, xs = np.indices(labels.shape)
    for region_id in range(seg.region_count):
        mask = flat_labels == region_id
        rx, ry = xs.ravel()[mask], ys.ravel()[mask]
        regions[region_id] = Region(
            id=region_id,
            pixel_count=int(mask.sum()),
            box=BBox.from_corners(rx.min(), ry.min(), rx.max() + 1, ry.max() + 1),
            histogram=_color_histogram(flat_pixels[mask]),
        )

    pairs = np.concatenate(
        [
            np.stack([labels[:, :-1].ravel(), labels[:, 1:].ravel()], axis=1),
            np.stack([labels[:-1, :].ravel(), labels[1:, :].ravel()], axis=1),
        ]
    )
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    for a, b in np.unique(np.sort(pairs, axis=1), axis=0):
        regions[int(a)].neighbors.add(int(b))
        regions[int(b)].neighbors.add(int(a))
    return regions


def _merged_box(a: BBox, b: BBox) -> BBox:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    return BBox.from_corners(min(ax0, bx0), min(ay0, by0), max(ax1, bx1), max(ay1, by1))


def _similarity(a: Region, b: Region, image_area: float) -> float:
    color = float(np.minimum(a.histogram, b.histogram).sum()) / 3.0
    size = 1.0 - (a.pixel_count + b.pixel_count) / image_area
    fill = (
        1.0
        - (_merged_box(a.box, b.box).area - a.pixel_count - b.pixel_count) / image_area
    )
    return (color + size + fill) / 3.0


def selective_search(
    image: np.ndarray, cfg: ProposalConfig, *, image_id: str = ""
) -> ProposalSet:
    """Hierarchically merge segments, recording every region's box.

    For ``r`` initial regions exactly ``2r - 1`` boxes are returned: the
    initial regions in id order followed by each merge result.
    """

    _check_image(image)
    height, width = image.shape[:2]
    seg = felzenszwalb_segment(image, cfg.k, cfg.min_region_size, sigma=cfg.sigma)
    regions = _initial_regions(image, seg)
    image_area = float(width * height)

    recorded = [regions[rid].box for rid in sorted(regions)]
    merges: list[tuple[int, int]] = []
    similarities: dict[tuple[int, int], float] = {}
    for rid, region in regions.items():
        for nid in region.neighbors:
            if rid < nid:
                similarities[(rid, nid)] = _similarity(region, regions[nid], image_area)

    next_id = len(regions)
    while similarities:
        # Highest similarity first, lowest pair on ties.
        i, j = max(
            similarities, key=lambda pair: (similarities[pair], -pair[0], -pair[1])
        )
        a, b = regions.pop(i), regions.pop(j)
        size = a.pixel_count + b.pixel_count
        merged = Region(
            id=next_id,
            pixel_count=size,
            box=_merged_box(a.box, b.box),
            histogram=(a.histogram * a.pixel_count + b.histogram * b.pixel_count)
            / size,
            neighbors=(a.neighbors | b.neighbors) - {i, j},
        )
        similarities = {
            pair: value
            for pair, value in similarities.items()
            if i not in pair and j not in pair
        }
        for nid in merged.neighbors:
            neighbor = regions[nid]
            neighbor.neighbors -= {i, j}
            neighbor.neighbors.add(next_id)
            similarities[(nid, next_id)] = _similarity(neighbor, merged, image_area)
        regions[next_id] = merged
        recorded.append(merged.box)
        merges.append((i, j))
        next_id += 1

    boxes = [clip_to_image(box, width, height) for box in recorded]
    logger.debug(
        "selective search on %s: %d regions, %d boxes",
        image_id,
        seg.region_count,
        len(boxes),
    )
    return ProposalSet(image_id, width, height, boxes, merges)


def filter_proposals(raw: ProposalSet, cfg: ProposalConfig) -> ProposalSet:
    """Drop small or elongated boxes, suppress overlaps, keep the largest."""

    lo, hi = cfg.aspect_ratio_range
    kept = [
        box
        for box in raw.boxes
        if min(box.w, box.h) >= cfg.min_box_side and lo <= box.w / box.h <= hi
    ]
    if not kept:
        return ProposalSet(raw.image_id, raw.width, raw.height, [])
    arr = boxes_to_array(kept)
    order = nms_array(arr, arr[:, 2] * arr[:, 3], cfg.nms_threshold)
    survivors = [kept[idx] for idx in order[: cfg.max_proposals]]
    return ProposalSet(raw.image_id, raw.width, raw.height, survivors)


def generate_proposals(
    image: np.ndarray, cfg: ProposalConfig, *, image_id: str = ""
) -> ProposalSet:
    """Selective search followed by filtering; the pseudo labels of one image."""

    proposals = filter_proposals(selective_search(image, cfg, image_id=image_id), cfg)
    if not proposals.boxes:
        logger.warning("image %s produced no proposals after filtering", image_id)
    return proposals


# ---------------------------------------------------------------------------
# Proposals file: one line per image ``image_id n x0 y0 x1 y1 ...``
# ---------------------------------------------------------------------------


def write_proposals(path: Path, proposal_sets: Iterable[ProposalSet]) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines: list[str] = []
    for item in proposal_sets:
        coords: list[str] = []
        for box in item.boxes:
            coords.extend(f"{value!r}" for value in box.corners())
        lines.append(" ".join([item.image_id, str(len(item.boxes)), *coords]))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return len(lines)


def read_proposals(
    path: Path, image_sizes: Mapping[str, tuple[int, int]]
) -> dict[str, ProposalSet]:
    """Parse a proposals file; ``image_sizes`` maps image id to ``(w, h)``."""

    if not path.exists():
        raise ProposalError(f"Proposals file not found: {path}")
    result: dict[str, ProposalSet] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        image_id = parts[0]
        try:
            count = int(parts[1])
            values = [float(v) for v in parts[2:]]
        except (IndexError, ValueError) as exc:
            raise ProposalError(f"{path}:{lineno}: malformed proposal line") from exc
        if len(values) != 4 * count:
            raise ProposalError(f"{path}:{lineno}: expected {count} boxes")
        if image_id not in image_sizes:
            raise ProposalError(f"{path}:{lineno}: unknown image id '{image_id}'")
        width, height = image_sizes[image_id]
        boxes = [
            BBox.from_corners(*values[i : i + 4]) for i in range(0, len(values), 4)
        ]
        for box in boxes:
            if not box_inside(box, width, height):
                raise ProposalError(f"{path}:{lineno}: box {box} outside image")
        result[image_id] = ProposalSet(image_id, width, height, boxes)
    return result


__all__ = [
    "ProposalError",
    "ProposalSet",
    "Region",
    "SegmentLabelMap",
    "felzenszwalb_segment",
    "filter_proposals",
    "generate_proposals",
    "read_proposals",
    "selective_search",
    "write_proposals",
]
