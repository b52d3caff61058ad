"""Two-view augmentation with consistent image and box changes.

Only resize, horizontal flip and photometric jitter are used, so every
proposal survives in both views and keeps its index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import AugConfig
from .geometry import BBox
from .proposals import ProposalSet


@dataclass(slots=True, frozen=True)
class Photometric:
    brightness: float = 0.0
    contrast: float = 1.0
    channel_gains: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def is_neutral(self) -> bool:
        return (
            self.brightness == 0.0
            and self.contrast == 1.0
            and self.channel_gains == (1.0, 1.0, 1.0)
        )


@dataclass(slots=True, frozen=True)
class ViewTransform:
    source_size: tuple[int, int]
    output_size: tuple[int, int]
    scale: float
    hflip: bool = False
    photometric: Photometric = Photometric()

    @classmethod
    def identity(cls, width: int, height: int) -> "ViewTransform":
        return cls((width, height), (width, height), 1.0)

    @classmethod
    def scaled(
        cls, width: int, height: int, scale: float, *, hflip: bool = False
    ) -> "ViewTransform":
        output = (max(1, round(width * scale)), max(1, round(height * scale)))
        return cls((width, height), output, scale, hflip)


@dataclass(slots=True)
class AugmentedView:
    image: np.ndarray
    proposals: ProposalSet
    transform: ViewTransform


def sample_transform(
    rng: np.random.Generator, cfg: AugConfig, source_size: tuple[int, int]
) -> ViewTransform:
    """Draw a view transform; the short side lands in ``cfg.short_side_range``."""

    width, height = source_size
    lo, hi = cfg.short_side_range
    short_side = int(rng.integers(lo, hi + 1))
    scale = short_side / min(width, height)
    hflip = bool(rng.random() < cfg.hflip_p)
    brightness = float(rng.uniform(-cfg.brightness, cfg.brightness))
    contrast = float(rng.uniform(*cfg.contrast_range))
    gains = rng.uniform(1.0 - cfg.channel_jitter, 1.0 + cfg.channel_jitter, size=3)
    base = ViewTransform.scaled(width, height, scale, hflip=hflip)
    return ViewTransform(
        source_size=base.source_size,
        output_size=base.output_size,
        scale=scale,
        hflip=hflip,
        photometric=Photometric(
            brightness, contrast, (float(gains[0]), float(gains[1]), float(gains[2]))
        ),
    )


def _resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    width, height = size
    if image.shape[1] == width and image.shape[0] == height:
        return image
    tensor = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
    resized = F.interpolate(
        tensor.float(), size=(height, width), mode="bilinear", align_corners=False
    )
    return resized[0].permute(1, 2, 0).numpy().astype(image.dtype)


def _photometric(image: np.ndarray, params: Photometric) -> np.ndarray:
    if params.is_neutral:
        return image
    mean = image.mean(dtype=np.float64)
    out = (image - mean) * params.contrast + mean + params.brightness
    out = out * np.asarray(params.channel_gains, dtype=np.float64)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def apply_to_image(image: np.ndarray, t: ViewTransform) -> np.ndarray:
    """Bilinear resize, optional mirror, then the photometric map."""

    out = _resize(image, t.output_size)
    if t.hflip:
        out = out[:, ::-1]
    return np.ascontiguousarray(_photometric(out, t.photometric))


def _axis_factors(t: ViewTransform) -> tuple[float, float]:
    (src_w, src_h), (out_w, out_h) = t.source_size, t.output_size
    return out_w / src_w, out_h / src_h


def apply_to_boxes(proposals: ProposalSet, t: ViewTransform) -> ProposalSet:
    """Map proposal boxes into the view; order and count are preserved."""

    sx, sy = _axis_factors(t)
    out_w, out_h = t.output_size
    boxes: list[BBox] = []
    for box in proposals.boxes:
        cx = box.cx * sx
        if t.hflip:
            cx = out_w - cx
        boxes.append(BBox(cx, box.cy * sy, box.w * sx, box.h * sy))
    return ProposalSet(proposals.image_id, out_w, out_h, boxes)


def make_view(
    image: np.ndarray, proposals: ProposalSet, t: ViewTransform
) -> AugmentedView:
    return AugmentedView(apply_to_image(image, t), apply_to_boxes(proposals, t), t)


def pad_to_stride(image: np.ndarray, stride: int) -> np.ndarray:
    """Zero-pad right and bottom edges so both sides divide ``stride``."""

    height, width = image.shape[:2]
    pad_h = (-height) % stride
    pad_w = (-width) % stride
    if pad_h == 0 and pad_w == 0:
        return image
    return np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)))


__all__ = [
    "AugmentedView",
    "Photometric",
    "ViewTransform",
    "apply_to_boxes",
    "apply_to_image",
    "make_view",
    "pad_to_stride",
    "sample_transform",
]
