from __future__ import annotations

import textwrap
from pathlib import Path

import pytest
from boxpretrain.config import (
    ConfigError,
    InvalidConfigError,
    MissingConfigError,
    RunConfig,
    apply_overrides,
    bootstrap_config_file,
    config_from_flat,
    load_config,
)

SAMPLE_CONFIG = Path(__file__).resolve().parent.parent / "config" / "config.sample.toml"


def write_config(tmp_path: Path, content: str) -> Path:
    config_file = tmp_path / "config.toml"
    config_file.parent.mkdir(parents=True, exist_ok=True)
    config_file.write_text(textwrap.dedent(content), encoding="utf-8")
    return config_file


def test_defaults_without_file() -> None:
    config = load_config()

    assert config.flavor == "anchor"
    assert config.loss.tau == 0.5
    assert config.ema.m == 0.999
    assert config.source_path is None


def test_load_config_success(tmp_path: Path) -> None:
    config_path = write_config(
        tmp_path,
        """
        seed = 7
        flavor = "point"

        [loss]
        tau = 0.2
        exclude_background_negatives = true
        """,
    )

    config = load_config(config_path)

    assert isinstance(config, RunConfig)
    assert config.seed == 7
    assert config.flavor == "point"
    assert config.loss.tau == 0.2
    assert config.loss.exclude_background_negatives is True
    assert config.source_path == config_path


def test_dotted_keys_and_tables_are_equivalent(tmp_path: Path) -> None:
    dotted = load_config(
        write_config(tmp_path / "a", "aug.short_side_range = [48, 56]\nema.m = 0.99\n")
    )
    tables = load_config(
        write_config(
            tmp_path / "b",
            """
            [aug]
            short_side_range = [48, 56]

            [ema]
            m = 0.99
            """,
        )
    )

    assert dotted.to_flat_dict() == tables.to_flat_dict()
    assert dotted.aug.short_side_range == (48, 56)


def test_sample_config_loads() -> None:
    config = load_config(SAMPLE_CONFIG)

    assert config.flavor == "anchor"
    assert config.data.image_size == 64


def test_load_config_missing_file(tmp_path: Path) -> None:
    missing = tmp_path / "missing.toml"

    with pytest.raises(MissingConfigError) as excinfo:
        load_config(missing)

    assert excinfo.value.path == missing
    assert isinstance(excinfo.value, ConfigError)


def test_malformed_toml(tmp_path: Path) -> None:
    config_path = write_config(tmp_path, "seed = = 1\n")

    with pytest.raises(InvalidConfigError, match="Malformed configuration"):
        load_config(config_path)


def test_unknown_key_is_rejected(tmp_path: Path) -> None:
    config_path = write_config(tmp_path, "[loss]\ntemperature = 0.5\n")

    with pytest.raises(InvalidConfigError, match="loss.temperature"):
        load_config(config_path)


@pytest.mark.parametrize(
    ("key", "value", "message"),
    [
        ("ema.m", 1.0, "ema.m"),
        ("loss.tau", 0.0, "loss.tau"),
        ("assign.neg_iou", 0.6, "assignment thresholds"),
        ("finetune.fraction", 0.0, "finetune.fraction"),
        ("data.classes", ["disk", "hexagon"], "unknown shape classes"),
        ("data.min_visible", 0.0, "data.min_visible"),
        ("loss.reduction", "mean", "loss.reduction"),
        ("seed", "abc", "must be an integer"),
        ("aug.short_side_range", [64], "exactly two values"),
    ],
)
def test_invalid_values_are_rejected(key: str, value: object, message: str) -> None:
    with pytest.raises(InvalidConfigError, match=message):
        apply_overrides(RunConfig(), {key: value})


def test_query_flavor_needs_enough_queries() -> None:
    with pytest.raises(InvalidConfigError, match="num_queries"):
        apply_overrides(RunConfig(), {"flavor": "query", "model.num_queries": 8})


def test_overrides_apply_after_file_and_coerce_strings(tmp_path: Path) -> None:
    config_path = write_config(tmp_path, "[loss]\ntau = 0.2\n")

    config = load_config(
        config_path,
        {
            "loss.tau": "0.7",
            "ema.include_projection": "false",
            "data.size_range": "8, 16",
            "pretrain.epochs": "3",
        },
    )

    assert config.loss.tau == 0.7
    assert config.ema.include_projection is False
    assert config.data.size_range == (8.0, 16.0)
    assert config.pretrain.epochs == 3


def test_box_epochs_follow_flavor() -> None:
    config = apply_overrides(
        RunConfig(), {"pretrain.epochs": 3, "pretrain.query_epochs": 9}
    )
    assert config.box_epochs == 3

    apply_overrides(config, {"flavor": "query"})
    assert config.box_epochs == 9


def test_flat_snapshot_rebuilds_config() -> None:
    original = apply_overrides(RunConfig(), {"seed": 3, "loss.tau": 0.3})

    rebuilt = config_from_flat(original.to_flat_dict())

    assert rebuilt.to_flat_dict() == original.to_flat_dict()
    assert "source_path" not in original.to_flat_dict()


def test_bootstrap_config_file_writes_loadable_defaults(tmp_path: Path) -> None:
    target = tmp_path / "nested" / "config.toml"

    assert bootstrap_config_file(target) is True
    assert bootstrap_config_file(target) is False

    assert load_config(target).to_flat_dict() == RunConfig().to_flat_dict()
