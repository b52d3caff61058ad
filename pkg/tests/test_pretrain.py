from __future__ import annotations

from pathlib import Path
from typing import Callable

import numpy as np
import pytest
import torch
from boxpretrain.assign import PseudoClassMap
from boxpretrain.checkpoint import (
    ARRAYS_FILENAME,
    CheckpointManifest,
    load_checkpoint,
)
from boxpretrain.config import RunConfig
from boxpretrain.data import DatasetManifest
from boxpretrain.geometry import BBox
from boxpretrain.netcore import ParamSet
from boxpretrain.plugins import resolve_flavor
from boxpretrain.proposals import ProposalSet
from boxpretrain.services.finetune import finetune
from boxpretrain.services.pretrain import (
    BoxSample,
    TrainingError,
    backbone_manifest,
    box_domain_step,
    build_net,
    build_pseudo_classes,
    ema_prefixes,
    ema_update,
    image_domain_pretrain,
    load_backbone,
    load_for_finetune,
    momentum_copy,
    run_box_pretrain,
)
from boxpretrain.utils.metrics import MetricsWriter, StepMetrics, read_metrics


def _param_set(value: float) -> ParamSet:
    return ParamSet({"w": torch.nn.Parameter(torch.full((2,), value))})


def _boxed(
    dataset: DatasetManifest, pseudo: PseudoClassMap | None = None
) -> BoxSample:
    """First dataset image with a single hand-placed proposal."""

    return BoxSample(
        dataset.load_image(dataset.images[0]),
        ProposalSet("boxed", 32, 32, [BBox(16.0, 16.0, 12.0, 12.0)]),
        pseudo,
    )


def _backbone_checkpoint(dataset: DatasetManifest, config: RunConfig):
    return backbone_manifest(image_domain_pretrain(dataset, config), config)


def test_ema_update_follows_closed_form() -> None:
    online, momentum = _param_set(1.0), _param_set(0.0)

    for _ in range(3):
        ema_update(online, momentum, 0.9)

    expected = 1.0 - 0.9**3
    assert momentum["w"].detach().tolist() == pytest.approx([expected, expected])


def test_ema_with_zero_momentum_copies_online() -> None:
    online, momentum = _param_set(2.5), _param_set(-1.0)

    ema_update(online, momentum, 0.0)

    assert momentum["w"].detach().tolist() == [2.5, 2.5]


def test_ema_rejects_bad_momentum_and_mismatched_sets() -> None:
    with pytest.raises(TrainingError):
        ema_update(_param_set(1.0), _param_set(0.0), 1.0)
    other = ParamSet({"v": torch.nn.Parameter(torch.zeros(2))})
    with pytest.raises(TrainingError, match="names differ"):
        ema_update(_param_set(1.0), other, 0.5)
    wide = ParamSet({"w": torch.nn.Parameter(torch.zeros(3))})
    with pytest.raises(TrainingError, match="shape mismatch"):
        ema_update(_param_set(1.0), wide, 0.5)


def test_projection_can_be_left_out_of_ema(
    make_config: Callable[..., RunConfig],
) -> None:
    assert "projection." in ema_prefixes(make_config())
    excluded = make_config({"ema.include_projection": False})
    assert ema_prefixes(excluded) == ("neck.", "head.")


def test_image_domain_pretrain_yields_loadable_backbone(
    dataset: DatasetManifest, config: RunConfig
) -> None:
    with MetricsWriter(Path(dataset.root) / "image.csv") as writer:
        backbone = image_domain_pretrain(dataset, config, metrics=writer)
    manifest = backbone_manifest(backbone, config, step=writer.rows)

    assert backbone.names()
    assert all(name.startswith("backbone.") for name in backbone.names())
    assert manifest.kind == "image"
    assert writer.rows == 2  # 4 images, batch size 2, one epoch
    net = build_net(config, resolve_flavor(config))
    load_backbone(net, manifest)
    loaded = net.params().subset(["backbone."]).to_arrays()
    for name, value in manifest.arrays.items():
        assert np.array_equal(loaded[name], value)


@pytest.mark.parametrize("flavor_id", ["anchor", "point", "query"])
def test_box_step_trains_branches_and_tracks_momentum(
    flavor_id: str,
    dataset: DatasetManifest,
    make_config: Callable[..., RunConfig],
) -> None:
    config = make_config({"flavor": flavor_id, "ema.m": 0.9})
    flavor = resolve_flavor(config)
    pseudo = None if flavor.dense else PseudoClassMap(np.array([1]), 3)
    net_q = build_net(config, flavor, pseudo_classes=None if pseudo is None else 3)
    net_q.params().freeze("backbone.")
    net_k = momentum_copy(net_q)
    before_q = net_q.params().to_arrays()
    before_k = net_k.params().to_arrays()

    metrics = box_domain_step(
        net_q,
        net_k,
        [_boxed(dataset, pseudo)],
        config,
        flavor=flavor,
        rng=np.random.default_rng(0),
    )

    after_q = net_q.params().to_arrays()
    after_k = net_k.params().to_arrays()
    assert np.isfinite(metrics.loss_total)
    assert metrics.pos_count >= 1
    for name in before_q:
        if name.startswith("backbone."):
            assert np.array_equal(before_q[name], after_q[name])
    changed = [n for n in before_q if not np.array_equal(before_q[n], after_q[n])]
    assert any(name.startswith("head.") for name in changed)
    for name in before_k:
        if name.startswith(("neck.", "head.", "projection.")):
            expected = 0.9 * before_k[name] + 0.1 * after_q[name]
            assert np.allclose(after_k[name], expected, atol=1e-6)
        else:
            assert np.array_equal(before_k[name], after_k[name])


def test_box_step_skips_images_without_proposals(
    dataset: DatasetManifest, config: RunConfig
) -> None:
    flavor = resolve_flavor(config)
    net_q = build_net(config, flavor)
    net_k = momentum_copy(net_q)
    empty = BoxSample(
        dataset.load_image(dataset.images[1]), ProposalSet("empty", 32, 32, [])
    )

    metrics = box_domain_step(
        net_q,
        net_k,
        [_boxed(dataset), empty],
        config,
        flavor=flavor,
        rng=np.random.default_rng(1),
    )

    assert metrics.skipped_images == 1
    assert metrics.pos_count >= 1


def test_box_step_without_any_proposals_still_updates_momentum(
    dataset: DatasetManifest, make_config: Callable[..., RunConfig]
) -> None:
    config = make_config({"ema.m": 0.5})
    flavor = resolve_flavor(config)
    net_q = build_net(config, flavor)
    net_k = momentum_copy(net_q)
    empty = BoxSample(
        dataset.load_image(dataset.images[0]), ProposalSet("empty", 32, 32, [])
    )

    metrics = box_domain_step(
        net_q, net_k, [empty], config, flavor=flavor, rng=np.random.default_rng(2)
    )

    assert metrics.skipped_images == 1
    assert metrics.loss_total == 0.0
    assert metrics.pairs == 0


def test_pseudo_classes_cover_every_proposal(
    dataset: DatasetManifest,
    proposals: dict[str, ProposalSet],
    make_config: Callable[..., RunConfig],
) -> None:
    config = make_config({"flavor": "query"})
    net = build_net(config, resolve_flavor(config))

    maps = build_pseudo_classes(net, dataset, proposals, config)

    for record in dataset.images:
        labels = maps[record.id].labels
        assert len(labels) == len(proposals[record.id])
        assert labels.min() >= 0 and labels.max() < maps[record.id].k
    assert next(iter(maps.values())).k == config.assign.pseudo_classes


def test_frozen_backbone_stays_bit_identical_over_several_steps(
    dataset: DatasetManifest, make_config: Callable[..., RunConfig]
) -> None:
    config = make_config({"pretrain.freeze_backbone": True})
    flavor = resolve_flavor(config)
    net_q = build_net(config, flavor)
    net_q.params().freeze("backbone.")
    net_k = momentum_copy(net_q)
    before = net_q.params().subset(["backbone."]).to_arrays()
    batch = [_boxed(dataset), _boxed(dataset)]

    for step in range(4):
        box_domain_step(
            net_q,
            net_k,
            batch,
            config,
            flavor=flavor,
            rng=np.random.default_rng(step),
            step=step,
        )

    after = net_q.params().subset(["backbone."]).to_arrays()
    momentum = net_k.params().subset(["backbone."]).to_arrays()
    assert before.keys() == after.keys()
    for name, value in before.items():
        assert np.array_equal(after[name], value), name
        assert np.array_equal(momentum[name], value), name


def test_same_seed_box_runs_write_identical_checkpoints(
    tmp_path: Path,
    dataset: DatasetManifest,
    proposals: dict[str, ProposalSet],
    make_config: Callable[..., RunConfig],
) -> None:
    config = make_config({"pretrain.epochs": 1})
    flavor = resolve_flavor(config)
    backbone = _backbone_checkpoint(dataset, config)

    for name in ("first", "second"):
        run_box_pretrain(
            dataset,
            proposals,
            config,
            flavor=flavor,
            backbone=backbone,
            out_dir=tmp_path / name,
        )

    first = (tmp_path / "first" / ARRAYS_FILENAME).read_bytes()
    second = (tmp_path / "second" / ARRAYS_FILENAME).read_bytes()
    assert first == second
    saved = load_checkpoint(tmp_path / "first", kind="box")
    for name, value in backbone.arrays.items():
        assert np.array_equal(saved.arrays[f"online.{name}"], value), name


def test_zero_epoch_finetune_returns_initial_weights(
    dataset: DatasetManifest, make_config: Callable[..., RunConfig]
) -> None:
    config = make_config({"finetune.epochs": 0})
    flavor = resolve_flavor(config)
    net = build_net(config, flavor)
    net.attach_classifier(len(config.data.classes), config.seed + 2)
    before = net.params().to_arrays()

    result = finetune(net, dataset, config, flavor=flavor)

    assert result.history == []
    after = result.net.params().to_arrays()
    assert after.keys() == before.keys()
    for name, value in before.items():
        assert np.array_equal(after[name], value), name


@pytest.mark.slow
def test_resumed_run_matches_uninterrupted_run(
    tmp_path: Path,
    dataset: DatasetManifest,
    proposals: dict[str, ProposalSet],
    make_config: Callable[..., RunConfig],
) -> None:
    config = make_config()
    flavor = resolve_flavor(config)
    backbone = _backbone_checkpoint(dataset, config)

    straight = run_box_pretrain(
        dataset,
        proposals,
        config,
        flavor=flavor,
        backbone=backbone,
        out_dir=tmp_path / "straight",
    )
    first = make_config({"pretrain.epochs": 1})
    run_box_pretrain(
        dataset,
        proposals,
        first,
        flavor=flavor,
        backbone=backbone,
        out_dir=tmp_path / "resumed",
    )
    with MetricsWriter(tmp_path / "resumed.csv") as writer:
        resumed = run_box_pretrain(
            dataset,
            proposals,
            config,
            flavor=flavor,
            backbone=backbone,
            out_dir=tmp_path / "resumed",
            resume=True,
            metrics=writer,
        )

    assert (straight.epoch, straight.step) == (resumed.epoch, resumed.step) == (2, 4)
    assert len(read_metrics(tmp_path / "resumed.csv")) == 2
    for name, value in straight.arrays.items():
        assert np.allclose(resumed.arrays[name], value, atol=1e-6), name
    saved = load_checkpoint(tmp_path / "resumed", kind="box")
    assert saved.epoch == 2
    assert any(name.startswith("momentum.projection.") for name in saved.arrays)


def test_resume_drops_metrics_rows_past_the_checkpoint(
    tmp_path: Path,
    dataset: DatasetManifest,
    proposals: dict[str, ProposalSet],
    make_config: Callable[..., RunConfig],
) -> None:
    config = make_config({"pretrain.epochs": 1})
    flavor = resolve_flavor(config)
    backbone = _backbone_checkpoint(dataset, config)
    csv_path = tmp_path / "box.csv"
    with MetricsWriter(csv_path) as writer:
        run_box_pretrain(
            dataset,
            proposals,
            config,
            flavor=flavor,
            backbone=backbone,
            out_dir=tmp_path / "box",
            metrics=writer,
        )
        # a step of the next epoch that never reached a checkpoint
        writer.write(
            StepMetrics(step=2, loss_total=9.0, loss_con=9.0, loss_reg=0.0, lr=0.1)
        )

    with MetricsWriter(csv_path, append=True) as writer:
        run_box_pretrain(
            dataset,
            proposals,
            make_config({"pretrain.epochs": 2}),
            flavor=flavor,
            backbone=backbone,
            out_dir=tmp_path / "box",
            resume=True,
            metrics=writer,
        )

    rows = read_metrics(csv_path)
    assert [row["step"] for row in rows] == ["0", "1", "2", "3"]
    assert rows[2]["loss_total"] != "9.000000"


def test_resume_refuses_other_flavor(
    tmp_path: Path,
    dataset: DatasetManifest,
    proposals: dict[str, ProposalSet],
    make_config: Callable[..., RunConfig],
) -> None:
    config = make_config({"pretrain.epochs": 1})
    backbone = _backbone_checkpoint(dataset, config)
    run_box_pretrain(
        dataset,
        proposals,
        config,
        flavor=resolve_flavor(config),
        backbone=backbone,
        out_dir=tmp_path / "box",
    )
    point = make_config({"flavor": "point", "pretrain.epochs": 1})

    with pytest.raises(TrainingError, match="flavor 'anchor'"):
        run_box_pretrain(
            dataset,
            proposals,
            point,
            flavor=resolve_flavor(point),
            backbone=backbone,
            out_dir=tmp_path / "box",
            resume=True,
        )


def test_load_for_finetune_keeps_branches_and_redraws_projection(
    tmp_path: Path,
    dataset: DatasetManifest,
    proposals: dict[str, ProposalSet],
    make_config: Callable[..., RunConfig],
) -> None:
    config = make_config({"pretrain.epochs": 1})
    flavor = resolve_flavor(config)
    manifest = run_box_pretrain(
        dataset,
        proposals,
        config,
        flavor=flavor,
        backbone=_backbone_checkpoint(dataset, config),
        out_dir=tmp_path / "box",
    )

    net = load_for_finetune(manifest, config, num_classes=4, flavor=flavor)

    arrays = net.params().to_arrays()
    for name, value in arrays.items():
        if name.startswith(("backbone.", "neck.", "head.")):
            assert np.array_equal(value, manifest.arrays[f"online.{name}"])
    assert not np.array_equal(
        arrays["projection.fc1.weight"], manifest.arrays["online.projection.fc1.weight"]
    )
    assert arrays["classifier.weight"].shape == (5, config.model.box_feature_dim)


def test_load_for_finetune_rejects_image_checkpoint(config: RunConfig) -> None:
    manifest = CheckpointManifest(kind="image", arrays={})

    with pytest.raises(TrainingError, match="expected a 'box' checkpoint"):
        load_for_finetune(manifest, config, 4, flavor=resolve_flavor(config))
