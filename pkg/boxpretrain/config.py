"""Configuration management for boxpretrain runs."""

from __future__ import annotations

import dataclasses
import tomllib
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

DEFAULT_CONFIG_DIR = Path("~/.config/boxpretrain").expanduser()
DEFAULT_CONFIG_PATH = DEFAULT_CONFIG_DIR / "config.toml"

SHAPE_CLASSES = ("disk", "rectangle", "triangle", "cross")


class ConfigError(RuntimeError):
    """Base error for configuration related issues."""


class MissingConfigError(ConfigError):
    """Raised when the configuration file cannot be found."""

    def __init__(self, path: Path) -> None:
        super().__init__(f"Configuration file not found at {path}")
        self.path = path


class InvalidConfigError(ConfigError):
    """Raised when the configuration holds unknown keys or invalid values."""


@dataclass(slots=True)
class DataConfig:
    """Synthetic scene generation (``data.*``)."""

    image_size: int = 64
    min_objects: int = 2
    max_objects: int = 6
    size_range: tuple[float, float] = (12.0, 28.0)
    classes: tuple[str, ...] = SHAPE_CLASSES
    color_jitter: float = 0.08
    noise: float = 0.04
    overlap_cap: float = 0.3
    min_visible: float = 0.5
    train_images: int = 500
    eval_images: int = 100


@dataclass(slots=True)
class ProposalConfig:
    """Selective search and proposal filtering (``proposals.*``)."""

    k: float = 100.0
    sigma: float = 0.8
    min_region_size: int = 20
    min_box_side: float = 8.0
    aspect_ratio_range: tuple[float, float] = (1.0 / 3.0, 3.0)
    nms_threshold: float = 0.5
    max_proposals: int = 32


@dataclass(slots=True)
class AugConfig:
    """Two-view augmentation (``aug.*``). No crop of any kind is applied."""

    short_side_range: tuple[int, int] = (64, 80)
    hflip_p: float = 0.5
    brightness: float = 0.1
    contrast_range: tuple[float, float] = (0.8, 1.2)
    channel_jitter: float = 0.05


@dataclass(slots=True)
class ModelConfig:
    """Desk-scale detector dimensions (``model.*``)."""

    channels: int = 32
    box_feature_dim: int = 64
    embed_dim: int = 32
    pool_size: int = 3
    num_queries: int = 48
    level_split_area: float = 1024.0
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    prior_scale: float = 3.0


@dataclass(slots=True)
class AssignConfig:
    """Target assignment and prediction sampling (``assign.*``)."""

    pos_iou: float = 0.5
    neg_iou: float = 0.4
    low_quality_rescue: bool = True
    scale_split: float = 32.0
    hungarian_l1: float = 5.0
    hungarian_iou: float = 2.0
    hungarian_cls: float = 1.0
    dense_cap: int = 256
    query_cap: int = 64
    pseudo_classes: int = 16
    kmeans_iters: int = 50


@dataclass(slots=True)
class LossConfig:
    """Loss weights and contrastive switches (``loss.*``)."""

    tau: float = 0.5
    con_weight: float = 1.0
    reg_weight: float = 1.0
    cls_weight: float = 1.0
    l1_weight: float = 1.0
    iou_weight: float = 1.0
    positives_from_momentum: bool = False
    exclude_background_negatives: bool = False
    normalize_embeddings: bool = True
    reduction: str = "pairs"

    @property
    def regression_terms(self) -> int:
        return 2


@dataclass(slots=True)
class EmaConfig:
    """Momentum branch (``ema.*``)."""

    m: float = 0.999
    include_projection: bool = True


@dataclass(slots=True)
class ImagePretrainConfig:
    """Image-domain (whole image, siamese) pre-training (``image.*``)."""

    epochs: int = 4
    batch_size: int = 16
    lr: float = 0.05
    weight_decay: float = 1e-4
    hidden_dim: int = 64


@dataclass(slots=True)
class TrainConfig:
    """Box-domain pre-training (``pretrain.*``)."""

    epochs: int = 12
    query_epochs: int = 50
    batch_size: int = 8
    lr: float = 0.05
    weight_decay: float = 1e-4
    freeze_backbone: bool = True
    checkpoint_every: int = 1


@dataclass(slots=True)
class FinetuneConfig:
    """Supervised fine-tuning and evaluation (``finetune.*``)."""

    epochs: int = 12
    batch_size: int = 8
    lr: float = 0.02
    weight_decay: float = 1e-4
    pretrained_lr_mult: float = 1.5
    pretrained_wd_mult: float = 0.5
    fraction: float = 1.0
    folds: int = 1
    score_threshold: float = 0.05
    max_detections: int = 100
    nms_threshold: float = 0.5
    purity_k: int = 5


@dataclass(slots=True)
class RunConfig:
    """In-memory representation of a complete run configuration."""

    seed: int = 0
    flavor: str = "anchor"
    data: DataConfig = field(default_factory=DataConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    assign: AssignConfig = field(default_factory=AssignConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    image: ImagePretrainConfig = field(default_factory=ImagePretrainConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    source_path: Path | None = None

    @property
    def box_epochs(self) -> int:
        if self.flavor == "query":
            return self.pretrain.query_epochs
        return self.pretrain.epochs

    def to_flat_dict(self) -> dict[str, Any]:
        """Return the configuration as ``{"section.key": value}`` pairs."""

        flat: dict[str, Any] = {}
        for key, (owner, name) in _iter_fields(self):
            value = getattr(owner, name)
            flat[key] = list(value) if isinstance(value, tuple) else value
        return flat

    def validate(self) -> None:
        _validate(self)


def _iter_fields(config: RunConfig):
    for f in dataclasses.fields(config):
        if f.name == "source_path":
            continue
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                yield f"{f.name}.{sub.name}", (value, sub.name)
        else:
            yield f.name, (config, f.name)


def _field_types(owner: object) -> dict[str, Any]:
    return typing.get_type_hints(type(owner))


def _flatten(raw: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in raw.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def _coerce(key: str, value: Any, annotation: Any) -> Any:
    origin = typing.get_origin(annotation)
    if origin is tuple:
        item_types = typing.get_args(annotation)
        if isinstance(value, str):
            value = [part.strip() for part in value.split(",") if part.strip()]
        if not isinstance(value, (list, tuple)):
            raise InvalidConfigError(f"'{key}' must be a list")
        item_type = item_types[0]
        if len(item_types) == 2 and item_types[1] is not Ellipsis:
            if len(value) != 2:
                raise InvalidConfigError(f"'{key}' must hold exactly two values")
        return tuple(_coerce(key, item, item_type) for item in value)
    if origin in (typing.Union, types.UnionType):
        return _coerce(key, value, typing.get_args(annotation)[0])
    if annotation is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.strip().lower() in ("true", "1", "yes"):
            return True
        if isinstance(value, str) and value.strip().lower() in ("false", "0", "no"):
            return False
        raise InvalidConfigError(f"'{key}' must be a boolean")
    if annotation is int:
        if isinstance(value, bool):
            raise InvalidConfigError(f"'{key}' must be an integer")
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        except (TypeError, ValueError) as exc:
            raise InvalidConfigError(f"'{key}' must be an integer") from exc
    if annotation is float:
        if isinstance(value, bool):
            raise InvalidConfigError(f"'{key}' must be a number")
        try:
            return float(value)
        except (TypeError, ValueError) as exc:
            raise InvalidConfigError(f"'{key}' must be a number") from exc
    if annotation is str:
        if not isinstance(value, str):
            raise InvalidConfigError(f"'{key}' must be a string")
        return value.strip()
    return value  # pragma: no cover - every field is annotated above


def apply_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Apply ``{"section.key": value}`` overrides in place and return ``config``."""

    known = dict(_iter_fields(config))
    for key, value in overrides.items():
        target = known.get(key)
        if target is None:
            raise InvalidConfigError(f"Unknown configuration key: '{key}'")
        owner, name = target
        annotation = _field_types(owner)[name]
        setattr(owner, name, _coerce(key, value, annotation))
    config.validate()
    return config


def load_config(
    path: Path | None = None, overrides: Mapping[str, Any] | None = None
) -> RunConfig:
    """Load configuration from ``path`` (defaults when ``None``).

    Parameters
    ----------
    path:
        Optional location of a TOML run configuration. Both dotted keys
        (``loss.tau = 0.5``) and tables (``[loss]``) are accepted.
    overrides:
        Additional ``section.key`` values applied after the file, typically
        from CLI flags.

    Raises
    ------
    MissingConfigError
        If ``path`` is given but does not exist.
    InvalidConfigError
        If a key is unknown or a value is malformed.
    """

    config = RunConfig()
    if path is not None:
        config_path = path.expanduser()
        if not config_path.exists():
            raise MissingConfigError(config_path)
        try:
            with config_path.open("rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise InvalidConfigError(f"Malformed configuration: {exc}") from exc
        apply_overrides(config, _flatten(raw))
        config.source_path = config_path
    if overrides:
        apply_overrides(config, overrides)
    config.validate()
    return config


def config_from_flat(flat: Mapping[str, Any]) -> RunConfig:
    """Rebuild a configuration from a :meth:`RunConfig.to_flat_dict` snapshot."""

    return apply_overrides(RunConfig(), flat)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise InvalidConfigError(message)


def _validate(config: RunConfig) -> None:
    _require(bool(config.flavor.strip()), "'flavor' must not be empty")

    data = config.data
    _require(data.image_size >= 16, "'data.image_size' must be at least 16")
    _require(1 <= data.min_objects <= data.max_objects, "invalid object count range")
    _require(0 < data.size_range[0] <= data.size_range[1], "invalid 'data.size_range'")
    _require(
        data.size_range[1] <= data.image_size, "'data.size_range' exceeds the image"
    )
    _require(0.0 <= data.overlap_cap < 1.0, "'data.overlap_cap' must lie in [0, 1)")
    _require(
        0.0 < data.min_visible <= 1.0, "'data.min_visible' must lie in (0, 1]"
    )
    _require(len(data.classes) >= 1, "'data.classes' must not be empty")
    unknown = [name for name in data.classes if name not in SHAPE_CLASSES]
    _require(not unknown, f"unknown shape classes: {unknown}")
    _require(data.train_images >= 1 and data.eval_images >= 1, "image counts < 1")

    prop = config.proposals
    lo, hi = prop.aspect_ratio_range
    _require(0 < lo < hi, "'proposals.aspect_ratio_range' requires 0 < lo < hi")
    _require(0 < prop.nms_threshold <= 1, "'proposals.nms_threshold' not in (0, 1]")
    _require(prop.k > 0 and prop.min_region_size >= 1, "invalid segmentation params")
    _require(prop.max_proposals >= 1, "'proposals.max_proposals' must be positive")

    aug = config.aug
    s_lo, s_hi = aug.short_side_range
    _require(0 < s_lo <= s_hi, "invalid 'aug.short_side_range'")
    _require(0.0 <= aug.hflip_p <= 1.0, "'aug.hflip_p' must lie in [0, 1]")
    c_lo, c_hi = aug.contrast_range
    _require(0 < c_lo <= 1.0 <= c_hi, "'aug.contrast_range' must bracket 1")
    _require(aug.brightness >= 0 and aug.channel_jitter >= 0, "negative jitter")

    model = config.model
    _require(model.channels > 0 and model.embed_dim > 0, "model dims must be > 0")
    _require(model.pool_size >= 1, "'model.pool_size' must be positive")

    assign = config.assign
    _require(
        0 <= assign.neg_iou <= assign.pos_iou <= 1,
        "assignment thresholds require 0 <= neg_iou <= pos_iou <= 1",
    )
    _require(assign.dense_cap > 0 and assign.query_cap > 0, "sampling caps > 0")
    _require(assign.pseudo_classes >= 1, "'assign.pseudo_classes' must be >= 1")
    _require(
        model.num_queries >= prop.max_proposals or config.flavor != "query",
        "'model.num_queries' must be >= 'proposals.max_proposals' for query flavor",
    )

    loss = config.loss
    _require(loss.tau > 0, "'loss.tau' must be positive")
    weights = (
        loss.con_weight,
        loss.reg_weight,
        loss.cls_weight,
        loss.l1_weight,
        loss.iou_weight,
    )
    _require(all(w >= 0 for w in weights), "loss weights must be >= 0")
    _require(loss.reduction in ("pairs", "queries", "sum"), "invalid 'loss.reduction'")

    _require(0.0 <= config.ema.m < 1.0, "'ema.m' must lie in [0, 1)")

    for section in (config.image, config.pretrain, config.finetune):
        _require(section.batch_size >= 1, "batch sizes must be positive")
        _require(section.lr >= 0 and section.weight_decay >= 0, "lr/wd must be >= 0")
    _require(config.image.epochs >= 0, "'image.epochs' must be >= 0")
    _require(config.image.hidden_dim >= 2, "'image.hidden_dim' must be >= 2")
    _require(
        config.pretrain.epochs >= 0 and config.pretrain.query_epochs >= 0,
        "pretrain epochs must be >= 0",
    )
    _require(config.pretrain.checkpoint_every >= 1, "'checkpoint_every' must be >= 1")
    ft = config.finetune
    _require(ft.epochs >= 0, "'finetune.epochs' must be >= 0")
    _require(0 < ft.fraction <= 1, "'finetune.fraction' must lie in (0, 1]")
    _require(ft.folds >= 1, "'finetune.folds' must be >= 1")
    _require(ft.purity_k >= 1, "'finetune.purity_k' must be >= 1")


def bootstrap_config_file(path: Path) -> bool:
    """Create a config file holding every default if missing.

    Returns True when the file was created, False if it already existed.
    """

    if path.exists():
        return False

    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# boxpretrain run configuration (TOML dotted keys)"]
    for key, value in RunConfig().to_flat_dict().items():
        lines.append(f"{key} = {_toml_value(value)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return True


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(item) for item in value) + "]"
    return repr(value)


__all__ = [
    "AssignConfig",
    "AugConfig",
    "ConfigError",
    "DataConfig",
    "EmaConfig",
    "FinetuneConfig",
    "ImagePretrainConfig",
    "InvalidConfigError",
    "LossConfig",
    "MissingConfigError",
    "ModelConfig",
    "ProposalConfig",
    "RunConfig",
    "SHAPE_CLASSES",
    "TrainConfig",
    "apply_overrides",
    "bootstrap_config_file",
    "config_from_flat",
    "load_config",
]
