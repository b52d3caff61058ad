from __future__ import annotations

from pathlib import Path
from typing import Callable, Mapping

import pytest
from boxpretrain.config import RunConfig, apply_overrides
from boxpretrain.data import DatasetManifest, generate_dataset
from boxpretrain.proposals import ProposalSet, generate_proposals

TINY_OVERRIDES = {
    "data.image_size": 32,
    "data.min_objects": 2,
    "data.max_objects": 3,
    "data.size_range": [6.0, 12.0],
    "data.train_images": 4,
    "data.eval_images": 3,
    "proposals.max_proposals": 8,
    "proposals.min_box_side": 4.0,
    "aug.short_side_range": [32, 40],
    "model.channels": 8,
    "model.box_feature_dim": 16,
    "model.embed_dim": 8,
    "model.num_queries": 12,
    "assign.dense_cap": 32,
    "assign.query_cap": 12,
    "assign.pseudo_classes": 3,
    "image.epochs": 1,
    "image.batch_size": 2,
    "image.hidden_dim": 8,
    "pretrain.epochs": 2,
    "pretrain.query_epochs": 2,
    "pretrain.batch_size": 2,
    "finetune.epochs": 1,
    "finetune.batch_size": 2,
    "finetune.purity_k": 2,
}


def tiny_config(extra: Mapping[str, object] | None = None) -> RunConfig:
    return apply_overrides(RunConfig(), {**TINY_OVERRIDES, **(extra or {})})


@pytest.fixture
def make_config() -> Callable[..., RunConfig]:
    return tiny_config


@pytest.fixture
def config() -> RunConfig:
    return tiny_config()


@pytest.fixture
def dataset(tmp_path: Path, config: RunConfig) -> DatasetManifest:
    return generate_dataset(
        tmp_path / "train",
        config.data,
        count=config.data.train_images,
        seed=config.seed,
    )


@pytest.fixture
def eval_dataset(tmp_path: Path, config: RunConfig) -> DatasetManifest:
    return generate_dataset(
        tmp_path / "eval",
        config.data,
        count=config.data.eval_images,
        seed=config.seed,
        split=1,
    )


@pytest.fixture
def proposals(dataset: DatasetManifest, config: RunConfig) -> dict[str, ProposalSet]:
    return {
        record.id: generate_proposals(
            dataset.load_image(record), config.proposals, image_id=record.id
        )
        for record in dataset.images
    }
