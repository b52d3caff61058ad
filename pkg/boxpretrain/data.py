"""Synthetic multi-object scenes, dataset manifests and low-data folds."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from skimage import draw

from .config import DataConfig
from .geometry import BBox, box_inside, iou

logger = logging.getLogger(__name__)

MANIFEST_FILENAME = "manifest.json"
MANIFEST_VERSION = 1
IMAGES_DIRNAME = "images"
MAX_PLACEMENT_ATTEMPTS = 1000

PALETTE: dict[str, tuple[float, float, float]] = {
    "disk": (0.85, 0.25, 0.20),
    "rectangle": (0.20, 0.35, 0.85),
    "triangle": (0.25, 0.75, 0.30),
    "cross": (0.90, 0.80, 0.20),
}


class DatasetError(RuntimeError):
    """Raised for unreadable datasets or impossible scene settings."""


@dataclass(slots=True)
class Scene:
    image: np.ndarray
    boxes: list[BBox]
    classes: list[int]
    visible: list[float] = field(default_factory=list)


@dataclass(slots=True)
class ImageRecord:
    """One manifest entry; ``classes`` is ``None`` once labels are stripped."""

    id: str
    file: str
    width: int
    height: int
    boxes: list[BBox] = field(default_factory=list)
    classes: list[int] | None = None


@dataclass(slots=True)
class DatasetManifest:
    root: Path
    seed: int
    class_names: tuple[str, ...]
    images: list[ImageRecord] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def __len__(self) -> int:
        return len(self.images)

    def image_path(self, record: ImageRecord) -> Path:
        return self.root / record.file

    def load_image(self, record: ImageRecord) -> np.ndarray:
        return read_ppm(self.image_path(record))

    def image_sizes(self) -> dict[str, tuple[int, int]]:
        return {record.id: (record.width, record.height) for record in self.images}

    def unlabeled(self) -> "DatasetManifest":
        """Copy without class ids, the only view the pre-training path sees."""

        return dataclasses.replace(
            self,
            images=[dataclasses.replace(r, classes=None) for r in self.images],
        )

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return dataclasses.replace(self, images=[self.images[i] for i in indices])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


def _shape_mask(
    rng: np.random.Generator, name: str, size: int, image_size: int
) -> np.ndarray:
    mask = np.zeros((image_size, image_size), dtype=bool)
    if name == "rectangle":
        height = int(np.clip(round(size * rng.uniform(0.6, 1.6)), 4, image_size))
        width = size
    else:
        height = width = size
    top = int(rng.integers(0, image_size - height + 1))
    left = int(rng.integers(0, image_size - width + 1))

    if name == "disk":
        radius = size / 2.0
        rr, cc = draw.disk(
            (top + radius - 0.5, left + radius - 0.5), radius, shape=mask.shape
        )
    elif name == "rectangle":
        rr, cc = draw.rectangle((top, left), extent=(height, width), shape=mask.shape)
    elif name == "triangle":
        rr, cc = draw.polygon(
            [top, top + height - 1, top + height - 1],
            [left + (width - 1) / 2.0, left, left + width - 1],
            shape=mask.shape,
        )
    elif name == "cross":
        bar = max(2, size // 3)
        offset = (size - bar) // 2
        rr1, cc1 = draw.rectangle(
            (top + offset, left), extent=(bar, width), shape=mask.shape
        )
        rr2, cc2 = draw.rectangle(
            (top, left + offset), extent=(height, bar), shape=mask.shape
        )
        mask[rr1, cc1] = True
        mask[rr2, cc2] = True
        return mask
    else:
        raise DatasetError(f"unknown shape class '{name}'")
    mask[rr, cc] = True
    return mask


def _tight_box(mask: np.ndarray) -> BBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox.from_corners(
        float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)
    )


def _hides_earlier(
    owner: np.ndarray, mask: np.ndarray, areas: list[int], min_visible: float
) -> bool:
    """True if painting ``mask`` leaves an earlier shape below ``min_visible``."""

    covered = owner[mask]
    covered = covered[covered >= 0]
    if covered.size == 0:
        return False
    shown = np.bincount(owner[owner >= 0], minlength=len(areas))
    lost = np.bincount(covered, minlength=len(areas))
    return bool(np.any(shown - lost < min_visible * np.asarray(areas)))


def _background(rng: np.random.Generator, settings: DataConfig) -> np.ndarray:
    size = settings.image_size
    base = rng.uniform(0.35, 0.6, size=3)
    ramp = np.linspace(-0.05, 0.05, size)
    texture = ramp[None, :, None] * rng.choice([-1.0, 1.0], size=3)
    noise = rng.normal(0.0, settings.noise, size=(size, size, 3))
    return base + texture + noise


def generate_scene(rng: np.random.Generator, settings: DataConfig) -> Scene:
    """Rasterize a random scene; GT boxes are the tight bounds of each shape.

    Later shapes may partially occlude earlier ones within the overlap cap,
    but every shape keeps at least ``min_visible`` of its pixels in view.
    Boxes always describe the full shape.
    """

    count = int(rng.integers(settings.min_objects, settings.max_objects + 1))
    lo, hi = settings.size_range
    image = _background(rng, settings)
    owner = np.full(image.shape[:2], -1, dtype=np.int64)
    areas: list[int] = []
    boxes: list[BBox] = []
    classes: list[int] = []
    attempts = 0
    while len(boxes) < count:
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise DatasetError(
                f"could not place {count} objects with overlap cap "
                f"{settings.overlap_cap} after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
        class_id = int(rng.integers(0, len(settings.classes)))
        size = int(round(rng.uniform(lo, min(hi, settings.image_size))))
        mask = _shape_mask(
            rng, settings.classes[class_id], max(size, 4), settings.image_size
        )
        box = _tight_box(mask)
        if any(iou(box, other) > settings.overlap_cap for other in boxes):
            continue
        if _hides_earlier(owner, mask, areas, settings.min_visible):
            continue
        color = np.asarray(PALETTE[settings.classes[class_id]]) + rng.uniform(
            -settings.color_jitter, settings.color_jitter, size=3
        )
        image[mask] = color
        owner[mask] = len(boxes)
        areas.append(int(mask.sum()))
        boxes.append(box)
        classes.append(class_id)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    shown = np.bincount(owner[owner >= 0], minlength=len(areas))
    visible = (shown / np.asarray(areas, dtype=np.float64)).tolist()
    return Scene(image=image, boxes=boxes, classes=classes, visible=visible)


def scene_rng(seed: int, split: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, split, index])


# ---------------------------------------------------------------------------
# PPM IO
# ---------------------------------------------------------------------------


def write_ppm(path: Path, image: np.ndarray) -> None:
    height, width = image.shape[:2]
    pixels = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + pixels.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    """Read a binary PPM written by :func:`write_ppm` as float32 in [0, 1]."""

    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise DatasetError(f"{path} is not a binary PPM")
    try:
        width, height = (int(v) for v in parts[1].split())
    except ValueError as exc:
        raise DatasetError(f"{path} has a malformed PPM size line") from exc
    payload = parts[3]
    if len(payload) != width * height * 3:
        raise DatasetError(f"{path} holds {len(payload)} bytes of pixel data")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def generate_dataset(
    directory: Path, settings: DataConfig, *, count: int, seed: int, split: int = 0
) -> DatasetManifest:
    """Generate ``count`` scenes into ``directory`` and write the manifest."""

    manifest = DatasetManifest(root=directory, seed=seed, class_names=settings.classes)
    prefix = "train" if split == 0 else "eval"
    for index in range(count):
        scene = generate_scene(scene_rng(seed, split, index), settings)
        image_id = f"{prefix}-{index:05d}"
        relative = f"{IMAGES_DIRNAME}/{image_id}.ppm"
        write_ppm(directory / relative, scene.image)
        height, width = scene.image.shape[:2]
        manifest.images.append(
            ImageRecord(image_id, relative, width, height, scene.boxes, scene.classes)
        )
    write_dataset(manifest)
    logger.info("generated %d %s images in %s", count, prefix, directory)
    return manifest


def _record_to_json(record: ImageRecord) -> dict[str, Any]:
    return {
        "id": record.id,
        "file": record.file,
        "width": record.width,
        "height": record.height,
        "boxes": [list(box.corners()) for box in record.boxes],
        "classes": record.classes,
    }


def write_dataset(manifest: DatasetManifest) -> Path:
    payload = {
        "version": manifest.version,
        "seed": manifest.seed,
        "class_names": list(manifest.class_names),
        "images": [_record_to_json(record) for record in manifest.images],
    }
    manifest.root.mkdir(parents=True, exist_ok=True)
    path = manifest.root / MANIFEST_FILENAME
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def _resolve_manifest_path(path: Path) -> Path:
    path = path.expanduser()
    return path / MANIFEST_FILENAME if path.is_dir() else path


def read_dataset(path: Path) -> DatasetManifest:
    """Load a manifest (file or its directory) and check every record."""

    manifest_path = _resolve_manifest_path(path)
    if not manifest_path.exists():
        raise DatasetError(f"dataset manifest not found: {manifest_path}")
    try:
        payload = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {manifest_path}: {exc}") from exc
    if payload.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {payload.get('version')!r}")

    root = manifest_path.parent
    manifest = DatasetManifest(
        root=root,
        seed=int(payload.get("seed", 0)),
        class_names=tuple(payload.get("class_names", ())),
        version=payload["version"],
    )
    seen: set[str] = set()
    for raw in payload.get("images", []):
        image_id = str(raw.get("id", ""))
        try:
            record = ImageRecord(
                id=image_id,
                file=str(raw["file"]),
                width=int(raw["width"]),
                height=int(raw["height"]),
                boxes=[BBox.from_corners(*map(float, b)) for b in raw["boxes"]],
                classes=None if raw.get("classes") is None else list(raw["classes"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"image '{image_id}': malformed record ({exc})") from exc
        if image_id in seen:
            raise DatasetError(f"duplicate image id '{image_id}'")
        seen.add(image_id)
        if not (root / record.file).exists():
            raise DatasetError(f"image '{image_id}': missing file {record.file}")
        for box in record.boxes:
            if not box_inside(box, record.width, record.height):
                raise DatasetError(f"image '{image_id}': box {box} out of bounds")
        if record.classes is not None and len(record.classes) != len(record.boxes):
            raise DatasetError(f"image '{image_id}': box and class counts differ")
        manifest.images.append(record)
    return manifest


def subsample_folds(
    manifest: DatasetManifest, fraction: float, n_folds: int, seed: int
) -> list[DatasetManifest]:
    """Independent uniform subsets of ``ceil(fraction * N)`` images per fold."""

    if not 0.0 < fraction <= 1.0:
        raise DatasetError(f"fraction must lie in (0, 1], got {fraction}")
    if n_folds < 1:
        raise DatasetError("at least one fold is required")
    total = len(manifest)
    if fraction * total < 1.0:
        raise DatasetError(f"fraction {fraction} of {total} images is empty")
    count = min(total, math.ceil(fraction * total - 1e-9))
    folds = []
    for fold in range(n_folds):
        rng = np.random.default_rng([seed, fold])
        indices = np.sort(rng.choice(total, size=count, replace=False))
        folds.append(manifest.subset([int(i) for i in indices]))
    return folds


__all__ = [
    "DatasetError",
    "DatasetManifest",
    "ImageRecord",
    "MANIFEST_FILENAME",
    "PALETTE",
    "Scene",
    "generate_dataset",
    "generate_scene",
    "read_dataset",
    "read_ppm",
    "scene_rng",
    "subsample_folds",
    "write_dataset",
    "write_ppm",
]
