"""End-to-end CLI runs on a tiny configuration."""

from __future__ import annotations

import json
import textwrap
from pathlib import Path

import pytest
from boxpretrain import cli
from boxpretrain.checkpoint import load_checkpoint
from boxpretrain.data import read_dataset

TINY_CONFIG = """
seed = 0
flavor = "anchor"

[data]
image_size = 32
min_objects = 2
max_objects = 3
size_range = [6.0, 12.0]
train_images = 4
eval_images = 3

[proposals]
max_proposals = 8
min_box_side = 4.0

[aug]
short_side_range = [32, 40]

[model]
channels = 8
box_feature_dim = 16
embed_dim = 8
num_queries = 12

[assign]
dense_cap = 32
query_cap = 12
pseudo_classes = 3

[image]
epochs = 1
batch_size = 2
hidden_dim = 8

[pretrain]
epochs = 1
query_epochs = 1
batch_size = 2

[finetune]
epochs = 1
batch_size = 2
purity_k = 2
"""


@pytest.fixture
def config_file(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.toml"
    path.write_text(textwrap.dedent(TINY_CONFIG), encoding="utf-8")
    return path


def run(config_file: Path, *args: object) -> int:
    return cli.main(["-c", str(config_file), *map(str, args)])


@pytest.mark.slow
def test_full_pipeline(
    tmp_path: Path, config_file: Path, capsys: pytest.CaptureFixture
) -> None:
    data = tmp_path / "data"
    props = tmp_path / "proposals.txt"
    image_ckpt = tmp_path / "ckpt" / "image"
    box_ckpt = tmp_path / "ckpt" / "box"
    runs = tmp_path / "runs"

    assert run(config_file, "gen-data", "-o", data) == 0
    assert len(read_dataset(data / "train")) == 4
    assert len(read_dataset(data / "eval")) == 3

    assert run(config_file, "gen-proposals", "-d", data / "train", "-o", props) == 0
    assert len(props.read_text().splitlines()) == 4

    image_args = ("-d", data / "train", "-o", image_ckpt)
    assert run(config_file, "pretrain-image", *image_args) == 0
    assert load_checkpoint(image_ckpt, kind="image").step == 2
    assert (tmp_path / "ckpt" / "image.csv").exists()

    box_args = ("-d", data / "train", "-p", props, "-b", image_ckpt, "-o", box_ckpt)
    assert run(config_file, "pretrain-box", *box_args) == 0
    assert load_checkpoint(box_ckpt, kind="box").epoch == 1

    # a second epoch on top of the saved one
    resume_args = (*box_args, "--resume", "--pretrain.epochs", 2)
    assert run(config_file, "pretrain-box", *resume_args) == 0
    assert load_checkpoint(box_ckpt, kind="box").epoch == 2
    assert len((tmp_path / "ckpt" / "box.csv").read_text().splitlines()) == 1 + 4

    capsys.readouterr()
    finetune_args = ("-d", data / "train", "-o", runs, "--pretrained", box_ckpt)
    assert run(config_file, "finetune", *finetune_args) == 0
    out = capsys.readouterr().out
    assert "fold-0 pretrained: final loss" in out
    assert "fold-0 random: final loss" in out

    eval_args = ("-d", data / "eval", "-r", runs, "--pretrained", box_ckpt)
    assert run(config_file, "eval", *eval_args) == 0
    assert "fold-0 pretrained: AP" in capsys.readouterr().out
    assert (runs / "fold-0" / "eval.json").exists()
    assert (runs / "purity.json").exists()

    assert run(config_file, "report", "-r", runs) == 0
    assert "AP50 gain (pretrained - random)" in capsys.readouterr().out
    report = json.loads((runs / "report.json").read_text())
    assert set(report["mean"]) == {"pretrained", "random"}


def test_missing_config_file_exits_with_config_code(
    tmp_path: Path, capsys: pytest.CaptureFixture
) -> None:
    code = run(tmp_path / "absent.toml", "gen-data", "-o", tmp_path / "data")

    assert code == 1
    assert "Run 'boxpt config'" in capsys.readouterr().err


def test_invalid_override_exits_with_config_code(
    tmp_path: Path, config_file: Path, capsys: pytest.CaptureFixture
) -> None:
    code = run(config_file, "gen-data", "-o", tmp_path / "data", "--ema.m", "1.5")

    assert code == 1
    assert "ema.m" in capsys.readouterr().err


def test_missing_dataset_exits_with_runtime_code(
    tmp_path: Path, config_file: Path, capsys: pytest.CaptureFixture
) -> None:
    code = run(
        config_file, "gen-proposals", "-d", tmp_path / "nowhere", "-o", tmp_path / "p"
    )

    assert code == 2
    assert "dataset manifest not found" in capsys.readouterr().err


def test_report_on_unevaluated_runs_exits_with_runtime_code(
    tmp_path: Path, config_file: Path, capsys: pytest.CaptureFixture
) -> None:
    (tmp_path / "runs" / "fold-0").mkdir(parents=True)

    assert run(config_file, "report", "-r", tmp_path / "runs") == 2
    assert "has not been evaluated" in capsys.readouterr().err


def test_config_bootstraps_file_once(
    tmp_path: Path, capsys: pytest.CaptureFixture
) -> None:
    target = tmp_path / "conf" / "config.toml"

    assert run(target, "config") == 0
    assert "Created configuration at" in capsys.readouterr().out
    assert target.exists()

    assert run(target, "config") == 0
    assert "Configuration already exists at" in capsys.readouterr().out


def test_config_show_applies_overrides(
    config_file: Path, capsys: pytest.CaptureFixture
) -> None:
    assert run(config_file, "config", "--show", "--loss.tau=0.3") == 0

    lines = capsys.readouterr().out.splitlines()
    assert "loss.tau = 0.3" in lines
    assert "data.image_size = 32" in lines


def test_config_lists_flavors(
    config_file: Path, capsys: pytest.CaptureFixture
) -> None:
    assert run(config_file, "config", "--flavors", "--flavor", "point") == 0

    lines = capsys.readouterr().out.splitlines()
    marked = [line.split("\t")[0] for line in lines]
    assert marked == ["  anchor", "* point", "  query"]
