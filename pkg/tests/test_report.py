from __future__ import annotations

import json
import math
from pathlib import Path

import pytest
from boxpretrain.services.report import (
    ReportError,
    render_report,
    summarize_runs,
    write_report_json,
)


def _write_fold(
    runs_dir: Path, fold: int, aps: dict[str, float], losses: list[float]
) -> None:
    fold_dir = runs_dir / f"fold-{fold}"
    payload = {}
    for arm, ap50 in aps.items():
        payload[arm] = {"ap": ap50 / 2, "ap50": ap50, "ap75": ap50 / 4}
        arm_dir = fold_dir / arm
        arm_dir.mkdir(parents=True)
        rows = "".join(f"{i},{loss}\n" for i, loss in enumerate(losses))
        (arm_dir / "metrics.csv").write_text("step,loss_total\n" + rows)
    (fold_dir / "eval.json").write_text(json.dumps(payload))


def test_summary_averages_folds(tmp_path: Path) -> None:
    _write_fold(tmp_path, 0, {"pretrained": 0.6, "random": 0.4}, [4.0, 3.0, 2.0, 1.0])
    _write_fold(tmp_path, 1, {"pretrained": 0.8, "random": 0.4}, [2.0, 1.0])

    summary = summarize_runs(tmp_path)

    assert [fold.fold for fold in summary.folds] == [0, 1]
    assert summary.arms == ["pretrained", "random"]
    assert summary.mean["pretrained"]["ap50"] == pytest.approx(0.7)
    assert summary.mean["pretrained"]["ap"] == pytest.approx(0.35)
    assert summary.ap50_gain == pytest.approx(0.3)
    assert summary.folds[0].arms["random"]["loss_quarter"] == 4.0
    assert summary.folds[0].arms["random"]["loss_final"] == 1.0
    assert summary.mean["random"]["loss_quarter"] == pytest.approx(3.0)
    assert summary.purity is None


def test_missing_metrics_reads_as_nan(tmp_path: Path) -> None:
    fold_dir = tmp_path / "fold-0"
    fold_dir.mkdir()
    (fold_dir / "eval.json").write_text(
        json.dumps({"random": {"ap": 0.1, "ap50": 0.2, "ap75": 0.0}})
    )

    summary = summarize_runs(tmp_path)

    assert math.isnan(summary.mean["random"]["loss_final"])
    assert summary.ap50_gain is None


def test_unevaluated_fold_is_an_error(tmp_path: Path) -> None:
    (tmp_path / "fold-0" / "random").mkdir(parents=True)

    with pytest.raises(ReportError, match="has not been evaluated"):
        summarize_runs(tmp_path)


def test_empty_runs_dir_is_an_error(tmp_path: Path) -> None:
    with pytest.raises(ReportError, match="no evaluated folds"):
        summarize_runs(tmp_path)


def test_corrupt_eval_file(tmp_path: Path) -> None:
    (tmp_path / "fold-0").mkdir()
    (tmp_path / "fold-0" / "eval.json").write_text("{not json")

    with pytest.raises(ReportError, match="cannot read"):
        summarize_runs(tmp_path)


def test_rendered_report_lists_arms_and_gain(tmp_path: Path) -> None:
    _write_fold(tmp_path, 0, {"pretrained": 0.6, "random": 0.4}, [2.0, 1.0])
    (tmp_path / "purity.json").write_text(
        json.dumps({"k": 5, "random": 0.25, "pretrained": 0.5})
    )

    text = render_report(summarize_runs(tmp_path))

    lines = text.splitlines()
    assert lines[0].split() == ["fold", "arm", "ap", "ap50", "ap75"] + [
        "loss_quarter",
        "loss_final",
    ]
    assert any(line.startswith("0     pretrained") for line in lines)
    assert any(line.startswith("mean  random") for line in lines)
    assert "AP50 gain (pretrained - random): +0.2000" in text
    assert "purity@5: random 0.2500, pretrained 0.5000" in text


def test_report_json_is_written(tmp_path: Path) -> None:
    _write_fold(tmp_path / "runs", 0, {"random": 0.5}, [1.0])
    target = tmp_path / "out" / "report.json"

    write_report_json(summarize_runs(tmp_path / "runs"), target)

    data = json.loads(target.read_text())
    assert data["mean"]["random"]["ap50"] == 0.5
    assert data["ap50_gain"] is None
    assert data["folds"][0]["fold"] == 0
