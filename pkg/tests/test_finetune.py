from __future__ import annotations

import json
from pathlib import Path
from typing import Callable

import pytest
from boxpretrain.checkpoint import CheckpointManifest, load_checkpoint
from boxpretrain.config import RunConfig
from boxpretrain.data import DatasetManifest
from boxpretrain.plugins import resolve_flavor
from boxpretrain.proposals import ProposalSet
from boxpretrain.services.finetune import (
    FinetuneError,
    FinetuneResult,
    detect,
    evaluate_runs,
    finetune,
    run_paired_finetune,
)
from boxpretrain.services.pretrain import (
    backbone_manifest,
    build_net,
    image_domain_pretrain,
    run_box_pretrain,
)
from boxpretrain.utils.metrics import read_metrics


@pytest.fixture
def pretrained(
    tmp_path: Path,
    dataset: DatasetManifest,
    proposals: dict[str, ProposalSet],
    make_config: Callable[..., RunConfig],
) -> CheckpointManifest:
    config = make_config({"pretrain.epochs": 1})
    backbone = backbone_manifest(image_domain_pretrain(dataset, config), config)
    return run_box_pretrain(
        dataset,
        proposals,
        config,
        flavor=resolve_flavor(config),
        backbone=backbone,
        out_dir=tmp_path / "box",
    )


def test_finetune_requires_classifier(
    dataset: DatasetManifest, config: RunConfig
) -> None:
    flavor = resolve_flavor(config)

    with pytest.raises(FinetuneError, match="classifier"):
        finetune(build_net(config, flavor), dataset, config, flavor=flavor)


def test_loss_at_needs_history(config: RunConfig) -> None:
    result = FinetuneResult(build_net(config, resolve_flavor(config)))

    with pytest.raises(FinetuneError, match="no fine-tuning steps"):
        result.loss_at(0.25)


def test_random_arm_alone_without_checkpoint(
    tmp_path: Path, dataset: DatasetManifest, config: RunConfig
) -> None:
    runs = run_paired_finetune(
        dataset, config, tmp_path / "runs", flavor=resolve_flavor(config)
    )

    assert [(run.fold, run.arm) for run in runs] == [(0, "random")]
    arm_dir = tmp_path / "runs" / "fold-0" / "random"
    assert runs[0].directory == arm_dir
    assert len(runs[0].result.history) == 2  # 4 images, batch size 2
    assert len(read_metrics(arm_dir / "metrics.csv")) == 2
    saved = load_checkpoint(arm_dir / "checkpoint", kind="finetune")
    assert saved.flavor == "anchor"
    assert "net.classifier.weight" in saved.arrays


def test_paired_arms_share_folds_and_step_counts(
    tmp_path: Path,
    dataset: DatasetManifest,
    pretrained: CheckpointManifest,
    make_config: Callable[..., RunConfig],
) -> None:
    config = make_config({"finetune.fraction": 0.5, "finetune.folds": 2})

    runs = run_paired_finetune(
        dataset,
        config,
        tmp_path / "runs",
        flavor=resolve_flavor(config),
        pretrained=pretrained,
    )

    assert [(run.fold, run.arm) for run in runs] == [
        (0, "pretrained"),
        (0, "random"),
        (1, "pretrained"),
        (1, "random"),
    ]
    for run in runs:
        assert len(run.result.history) == 1  # 2 images per fold, batch size 2
        assert (run.directory / "checkpoint").is_dir()
    by_arm = {run.arm: run.result.history[0] for run in runs if run.fold == 0}
    assert by_arm["pretrained"].lr == pytest.approx(config.finetune.lr * 1.5)
    assert by_arm["random"].lr == pytest.approx(config.finetune.lr)


def test_detections_are_scored_and_ordered(
    tmp_path: Path, dataset: DatasetManifest, config: RunConfig
) -> None:
    flavor = resolve_flavor(config)
    (run,) = run_paired_finetune(dataset, config, tmp_path / "runs", flavor=flavor)
    record = dataset.images[0]

    detections = detect(
        run.result.net, dataset.load_image(record), record.id, config, flavor=flavor
    )

    assert len(detections) <= config.finetune.max_detections
    scores = [det.score for det in detections]
    assert scores == sorted(scores, reverse=True)
    for det in detections:
        assert config.finetune.score_threshold <= det.score <= 1.0
        assert 0 <= det.class_id < dataset.num_classes
        assert det.image_id == record.id


def test_evaluate_runs_writes_reports(
    tmp_path: Path,
    dataset: DatasetManifest,
    eval_dataset: DatasetManifest,
    pretrained: CheckpointManifest,
    config: RunConfig,
) -> None:
    flavor = resolve_flavor(config)
    runs_dir = tmp_path / "runs"
    run_paired_finetune(
        dataset, config, runs_dir, flavor=flavor, pretrained=pretrained
    )

    results = evaluate_runs(
        runs_dir, eval_dataset, config, flavor=flavor, pretrained=pretrained
    )

    assert set(results) == {"fold-0"}
    assert set(results["fold-0"]) == {"pretrained", "random"}
    payload = json.loads((runs_dir / "fold-0" / "eval.json").read_text())
    for arm in ("pretrained", "random"):
        assert 0.0 <= payload[arm]["ap50"] <= 1.0
        assert set(payload[arm]) >= {"ap", "ap50", "ap75", "per_class"}
    purity = json.loads((runs_dir / "purity.json").read_text())
    assert purity["k"] == 2
    assert 0.0 <= purity["pretrained"] <= 1.0
    assert 0.0 <= purity["random"] <= 1.0


def test_evaluate_runs_without_folds(
    tmp_path: Path, eval_dataset: DatasetManifest, config: RunConfig
) -> None:
    (tmp_path / "runs").mkdir()

    with pytest.raises(FinetuneError, match="no fold directories"):
        evaluate_runs(
            tmp_path / "runs", eval_dataset, config, flavor=resolve_flavor(config)
        )
