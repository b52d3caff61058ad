"""Differentiable core: the detector's backbone, neck, head and projection.

The backbone produces two pyramid levels (strides 8 and 16), the neck is a
lateral + top-down FPN-lite, and the head holds two distinct branches: a
regression branch predicting box offsets and a box-feature branch pooling a
fixed grid inside each box. The projection maps box features to unit-norm
embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .geometry import decode_deltas_tensor

STRIDES = (8, 16)
TOTAL_STRIDE = STRIDES[-1]
BACKBONE_CHANNELS = (32, 64)
GRAPH_FREED_MESSAGE = "backward through the graph a second time"


class NetcoreError(RuntimeError):
    """Base error for network and gradient issues."""


class ShapeError(NetcoreError):
    """Raised when an input does not fit the network's stride arithmetic."""


class GraphConsumedError(NetcoreError):
    """Raised when ``backward`` runs twice on the same recorded loss."""


class NormalizationError(NetcoreError):
    """Raised when an embedding with zero norm cannot be normalized."""


class ParamSet:
    """Named parameters with per-parameter frozen flags.

    Freezing clears ``requires_grad`` so frozen tensors never collect a
    gradient, and :func:`sgd_step` skips them.
    """

    def __init__(
        self, params: Mapping[str, nn.Parameter], frozen: Iterable[str] = ()
    ) -> None:
        self._params = dict(params)
        self._frozen: set[str] = set()
        for name in frozen:
            self._set_frozen(name, True)

    @classmethod
    def from_module(cls, module: nn.Module, prefix: str = "") -> "ParamSet":
        params = {f"{prefix}{name}": p for name, p in module.named_parameters()}
        frozen = [name for name, p in params.items() if not p.requires_grad]
        return cls(params, frozen)

    def _set_frozen(self, name: str, frozen: bool) -> None:
        param = self._params[name]
        param.requires_grad_(not frozen)
        if frozen:
            param.grad = None
            self._frozen.add(name)
        else:
            self._frozen.discard(name)

    def freeze(self, prefix: str = "") -> int:
        names = [name for name in self._params if name.startswith(prefix)]
        for name in names:
            self._set_frozen(name, True)
        return len(names)

    def unfreeze(self, prefix: str = "") -> int:
        names = [name for name in self._params if name.startswith(prefix)]
        for name in names:
            self._set_frozen(name, False)
        return len(names)

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def subset(self, prefixes: Sequence[str]) -> "ParamSet":
        selected = {
            name: p
            for name, p in self._params.items()
            if any(name.startswith(prefix) for prefix in prefixes)
        }
        return ParamSet(selected, [name for name in selected if name in self._frozen])

    def trainable(self) -> Iterator[tuple[str, nn.Parameter]]:
        for name, param in self._params.items():
            if name not in self._frozen:
                yield name, param

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.grad = None

    def to_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {
            f"{prefix}{name}": p.detach().cpu().numpy().astype(np.float32, copy=True)
            for name, p in self._params.items()
        }

    def load_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
        missing = [name for name in self._params if f"{prefix}{name}" not in arrays]
        if missing:
            raise NetcoreError(f"Missing arrays: {', '.join(sorted(missing))}")
        with torch.no_grad():
            for name, param in self._params.items():
                value = np.asarray(arrays[f"{prefix}{name}"])
                if tuple(value.shape) != tuple(param.shape):
                    raise ShapeError(
                        f"Array '{name}' has shape {value.shape}, "
                        f"expected {tuple(param.shape)}"
                    )
                param.copy_(torch.from_numpy(value.astype(np.float32)))

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, nn.Parameter]]:
        return iter(self._params.items())

    def __getitem__(self, name: str) -> nn.Parameter:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)


def _conv(in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2)


class Backbone(nn.Module):
    """Small strided conv stack emitting the stride-8 and stride-16 maps."""

    def __init__(self) -> None:
        super().__init__()
        c3, c4 = BACKBONE_CHANNELS
        self.stem = nn.Sequential(
            _conv(3, 16, stride=2), nn.ReLU(), _conv(16, c3, stride=2), nn.ReLU()
        )
        self.stage3 = nn.Sequential(_conv(c3, c3, stride=2), nn.ReLU())
        self.stage4 = nn.Sequential(_conv(c3, c4, stride=2), nn.ReLU())

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        c3 = self.stage3(self.stem(x))
        return [c3, self.stage4(c3)]


class Neck(nn.Module):
    """1x1 laterals with a top-down nearest-neighbour add."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.lateral0 = nn.Conv2d(BACKBONE_CHANNELS[0], channels, 1)
        self.lateral1 = nn.Conv2d(BACKBONE_CHANNELS[1], channels, 1)

    def forward(self, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        c3, c4 = feats
        p4 = self.lateral1(c4)
        p3 = self.lateral0(c3) + F.interpolate(p4, scale_factor=2.0, mode="nearest")
        return [p3, p4]


class DenseRegBranch(nn.Module):
    """Per-location offset predictor shared across levels."""

    def __init__(self, channels: int, priors_per_location: int) -> None:
        super().__init__()
        self.priors_per_location = priors_per_location
        self.conv = _conv(channels, channels)
        self.out = _conv(channels, priors_per_location * 4)

    def forward(self, levels: Sequence[torch.Tensor]) -> torch.Tensor:
        outputs = []
        for fmap in levels:
            deltas = self.out(F.relu(self.conv(fmap)))
            # (1, A*4, H, W) -> rows ordered by (y, x, prior)
            outputs.append(deltas.permute(0, 2, 3, 1).reshape(-1, 4))
        return torch.cat(outputs, dim=0)


class QueryRegBranch(nn.Module):
    """Set-prediction head: one learned query per reference box."""

    def __init__(self, channels: int, num_queries: int, pool_size: int) -> None:
        super().__init__()
        self.num_queries = num_queries
        self.queries = nn.Parameter(torch.zeros(num_queries, channels))
        self.fc_in = nn.Linear(channels * pool_size * pool_size, channels)
        self.fc_hidden = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, 4)

    def forward(self, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        hidden = F.relu(self.fc_in(pooled) + self.queries)
        hidden = F.relu(self.fc_hidden(hidden))
        return self.out(hidden), hidden


class ConBranch(nn.Module):
    """Box-feature extractor applied to the pooled grid."""

    def __init__(self, in_dim: int, out_dim: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(in_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(pooled)))


class Projection(nn.Module):
    def __init__(self, in_dim: int, out_dim: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(in_dim, in_dim)
        self.fc2 = nn.Linear(in_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x)))


class Head(nn.Module):
    def __init__(
        self,
        cfg: ModelConfig,
        *,
        dense: bool,
        priors_per_location: int,
        pseudo_classes: int | None,
    ) -> None:
        super().__init__()
        pooled_dim = cfg.channels * cfg.pool_size * cfg.pool_size
        if dense:
            self.reg: nn.Module = DenseRegBranch(cfg.channels, priors_per_location)
        else:
            self.reg = QueryRegBranch(cfg.channels, cfg.num_queries, cfg.pool_size)
        self.con = ConBranch(pooled_dim, cfg.box_feature_dim)
        self.pseudo_cls = (
            nn.Linear(cfg.channels, pseudo_classes + 1)
            if pseudo_classes is not None and not dense
            else None
        )


@dataclass(slots=True)
class RegOutput:
    deltas: torch.Tensor
    boxes: torch.Tensor
    pseudo_logits: torch.Tensor | None = None


def init_module(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.Linear)):
        nn.init.kaiming_uniform_(module.weight, mode="fan_in", nonlinearity="relu")
        nn.init.zeros_(module.bias)


class DetectorNet(nn.Module):
    """Backbone, neck, head (reg / con branches) and projection ``g``."""

    def __init__(
        self,
        cfg: ModelConfig,
        *,
        dense: bool = True,
        priors_per_location: int = 1,
        pseudo_classes: int | None = None,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        self.dense = dense
        self.strides = STRIDES
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.backbone = Backbone()
            self.neck = Neck(cfg.channels)
            self.head = Head(
                cfg,
                dense=dense,
                priors_per_location=priors_per_location,
                pseudo_classes=pseudo_classes,
            )
            self.projection = Projection(cfg.box_feature_dim, cfg.embed_dim)
            self.apply(init_module)
            with torch.no_grad():
                if isinstance(self.head.reg, QueryRegBranch):
                    self.head.reg.queries.uniform_(-0.5, 0.5)
                self.head.reg.out.weight.mul_(0.1)
        self.classifier: nn.Linear | None = None

    def params(self) -> ParamSet:
        return ParamSet.from_module(self)

    def pyramid(self, image: torch.Tensor) -> list[torch.Tensor]:
        return self.neck(self.backbone(image))

    def regress(
        self, levels: Sequence[torch.Tensor], priors: torch.Tensor
    ) -> RegOutput:
        """Predict boxes for every prior (anchors, points or query references)."""

        if self.dense:
            deltas = self.head.reg(levels)
            if deltas.shape[0] != priors.shape[0]:
                raise ShapeError(
                    f"{deltas.shape[0]} predictions for {priors.shape[0]} priors"
                )
            return RegOutput(deltas, decode_deltas_tensor(priors, deltas))
        pooled = roi_pool(levels, priors, self.strides, self.cfg)
        deltas, hidden = self.head.reg(pooled)
        pseudo_cls = self.head.pseudo_cls
        logits = pseudo_cls(hidden) if pseudo_cls is not None else None
        return RegOutput(deltas, decode_deltas_tensor(priors, deltas), logits)

    def reset_projection(self, seed: int) -> None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.projection = Projection(self.cfg.box_feature_dim, self.cfg.embed_dim)
            self.projection.apply(init_module)

    def attach_classifier(self, num_classes: int, seed: int) -> None:
        """Add a fresh classifier: index 0 is background, 1..C the classes."""

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.classifier = nn.Linear(self.cfg.box_feature_dim, num_classes + 1)
            init_module(self.classifier)


def image_to_tensor(image: np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        return image if image.dim() == 4 else image[None]
    tensor = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
    return tensor.permute(2, 0, 1)[None]


def forward(net: DetectorNet, image: np.ndarray | torch.Tensor) -> list[torch.Tensor]:
    """Run backbone and neck; one feature map per pyramid level."""

    tensor = image_to_tensor(image)
    height, width = tensor.shape[-2:]
    if height % TOTAL_STRIDE or width % TOTAL_STRIDE or height == 0 or width == 0:
        raise ShapeError(
            f"Image {width}x{height} is not divisible by stride {TOTAL_STRIDE}"
        )
    return net.pyramid(tensor)


def box_levels(boxes: torch.Tensor, split_area: float) -> torch.Tensor:
    """Pyramid level per box: areas below ``split_area`` use the finer map."""

    return (boxes[:, 2] * boxes[:, 3] >= split_area).long()


def roi_pool(
    levels: Sequence[torch.Tensor],
    boxes: torch.Tensor,
    strides: Sequence[int],
    cfg: ModelConfig,
) -> torch.Tensor:
    """Bilinearly sample a ``pool_size`` x ``pool_size`` grid inside each box.

    ``boxes`` are center-format image pixels; the result has one row of
    ``channels * pool_size**2`` values per box, in input order.
    """

    size = cfg.pool_size
    channels = levels[0].shape[1]
    count = boxes.shape[0]
    out = levels[0].new_zeros((count, channels * size * size))
    if count == 0:
        return out
    offsets = (torch.arange(size, dtype=boxes.dtype) + 0.5) / size - 0.5
    assignment = box_levels(boxes, cfg.level_split_area)
    for level, (fmap, stride) in enumerate(zip(levels, strides)):
        index = torch.nonzero(assignment == level).squeeze(1)
        if index.numel() == 0:
            continue
        selected = boxes[index]
        xs = selected[:, 0:1] + offsets[None, :] * selected[:, 2:3]
        ys = selected[:, 1:2] + offsets[None, :] * selected[:, 3:4]
        height, width = fmap.shape[-2:]
        gx = (2.0 * (xs / stride) / width - 1.0)[:, None, :].expand(-1, size, -1)
        gy = (2.0 * (ys / stride) / height - 1.0)[:, :, None].expand(-1, -1, size)
        grid = torch.stack([gx, gy], dim=-1).reshape(1, index.numel(), size * size, 2)
        sampled = F.grid_sample(
            fmap,
            grid.to(fmap.dtype),
            mode="bilinear",
            padding_mode="border",
            align_corners=False,
        )
        rows = sampled[0].permute(1, 0, 2).reshape(index.numel(), -1)
        out = out.index_copy(0, index, rows)
    return out


def extract_box_features(
    net: DetectorNet, levels: Sequence[torch.Tensor], boxes: torch.Tensor
) -> torch.Tensor:
    """Pool each box on its level and apply the box-feature branch."""

    if boxes.shape[0] == 0:
        return levels[0].new_zeros((0, net.cfg.box_feature_dim))
    return net.head.con(roi_pool(levels, boxes, net.strides, net.cfg))


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise NormalizationError("Cannot normalize a zero embedding")
    return x / norms


def project(
    g: nn.Module, features: torch.Tensor, *, normalize: bool = True
) -> torch.Tensor:
    """Apply the projection; rows are unit-norm when ``normalize`` is set."""

    if features.shape[0] == 0:
        return features.new_zeros((0, g.fc2.out_features))
    z = g(features)
    return l2_normalize(z) if normalize else z


def backward(loss: torch.Tensor) -> None:
    """Populate gradients for every non-frozen parameter reached by ``loss``."""

    if getattr(loss, "_boxpretrain_consumed", False):
        raise GraphConsumedError("backward already ran for this loss; re-run forward")
    if not loss.requires_grad:
        loss._boxpretrain_consumed = True  # type: ignore[attr-defined]
        return
    try:
        loss.backward()
    except RuntimeError as exc:
        if GRAPH_FREED_MESSAGE not in str(exc):
            raise
        raise GraphConsumedError(str(exc)) from exc
    loss._boxpretrain_consumed = True  # type: ignore[attr-defined]


def sgd_step(params: ParamSet, lr: float, weight_decay: float) -> None:
    """``w <- w - lr * (grad + weight_decay * w)`` for non-frozen parameters."""

    with torch.no_grad():
        for _, param in params.trainable():
            if param.grad is None:
                continue
            param.sub_(lr * (param.grad + weight_decay * param))


__all__ = [
    "BACKBONE_CHANNELS",
    "Backbone",
    "DetectorNet",
    "GraphConsumedError",
    "NetcoreError",
    "Neck",
    "NormalizationError",
    "ParamSet",
    "RegOutput",
    "STRIDES",
    "ShapeError",
    "TOTAL_STRIDE",
    "backward",
    "box_levels",
    "extract_box_features",
    "forward",
    "image_to_tensor",
    "init_module",
    "l2_normalize",
    "project",
    "roi_pool",
    "sgd_step",
]
