"""Aggregate fine-tune and evaluation outputs into a text and JSON report."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from jinja2 import Environment, FileSystemLoader, TemplateNotFound

from ..utils.metrics import read_metrics
from .finetune import (
    EVAL_FILENAME,
    METRICS_FILENAME,
    PRETRAINED_ARM,
    PURITY_FILENAME,
    RANDOM_ARM,
    fold_directories,
)

TEMPLATES_DIR = Path(__file__).resolve().parent.parent / "templates"
REPORT_TEMPLATE = "report.txt.j2"
METRIC_KEYS = ("ap", "ap50", "ap75", "loss_quarter", "loss_final")
CONVERGENCE_FRACTION = 0.25


class ReportError(RuntimeError):
    """Raised when run outputs are missing or unreadable."""


@dataclass(slots=True)
class FoldSummary:
    fold: int
    arms: dict[str, dict[str, float]] = field(default_factory=dict)


@dataclass(slots=True)
class RunSummary:
    folds: list[FoldSummary]
    mean: dict[str, dict[str, float]]
    purity: dict[str, float] | None = None

    @property
    def arms(self) -> list[str]:
        order = (PRETRAINED_ARM, RANDOM_ARM)
        names = {arm for fold in self.folds for arm in fold.arms}
        return [arm for arm in order if arm in names] + sorted(names - set(order))

    @property
    def ap50_gain(self) -> float | None:
        if PRETRAINED_ARM in self.mean and RANDOM_ARM in self.mean:
            return self.mean[PRETRAINED_ARM]["ap50"] - self.mean[RANDOM_ARM]["ap50"]
        return None

    def as_dict(self) -> dict[str, Any]:
        return {
            "folds": [{"fold": f.fold, "arms": f.arms} for f in self.folds],
            "mean": self.mean,
            "ap50_gain": self.ap50_gain,
            "purity": self.purity,
        }


def _loss_curve(path: Path) -> tuple[float, float]:
    """Total loss at the quarter-budget point and at the last step."""

    if not path.exists():
        return math.nan, math.nan
    losses = [float(row["loss_total"]) for row in read_metrics(path)]
    if not losses:
        return math.nan, math.nan
    quarter = max(1, math.ceil(CONVERGENCE_FRACTION * len(losses)))
    return losses[quarter - 1], losses[-1]


def _read_json(path: Path) -> dict[str, Any]:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"cannot read {path}: {exc}") from exc


def summarize_runs(runs_dir: Path) -> RunSummary:
    """Per-fold metrics of every arm and their mean over folds."""

    folds: list[FoldSummary] = []
    for fold_dir in fold_directories(runs_dir):
        eval_path = fold_dir / EVAL_FILENAME
        if not eval_path.exists():
            raise ReportError(f"{fold_dir.name} has not been evaluated yet")
        summary = FoldSummary(int(fold_dir.name.split("-", 1)[1]))
        for arm, report in sorted(_read_json(eval_path).items()):
            quarter, final = _loss_curve(fold_dir / arm / METRICS_FILENAME)
            summary.arms[arm] = {
                "ap": float(report["ap"]),
                "ap50": float(report["ap50"]),
                "ap75": float(report["ap75"]),
                "loss_quarter": quarter,
                "loss_final": final,
            }
        folds.append(summary)
    if not folds:
        raise ReportError(f"no evaluated folds under {runs_dir}")

    mean: dict[str, dict[str, float]] = {}
    arms = {arm for fold in folds for arm in fold.arms}
    for arm in sorted(arms):
        rows = [fold.arms[arm] for fold in folds if arm in fold.arms]
        mean[arm] = {key: sum(r[key] for r in rows) / len(rows) for key in METRIC_KEYS}

    purity_path = runs_dir / PURITY_FILENAME
    purity = _read_json(purity_path) if purity_path.exists() else None
    return RunSummary(folds=folds, mean=mean, purity=purity)


def render_report(summary: RunSummary) -> str:
    env = Environment(
        loader=FileSystemLoader(str(TEMPLATES_DIR)),
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
    )
    try:
        template = env.get_template(REPORT_TEMPLATE)
    except TemplateNotFound as exc:  # pragma: no cover - shipped with the package
        raise ReportError(
            f"Template '{exc.name}' not found in {TEMPLATES_DIR}"
        ) from exc
    return template.render(summary=summary, keys=METRIC_KEYS)


def write_report_json(summary: RunSummary, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(summary.as_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


__all__ = [
    "FoldSummary",
    "ReportError",
    "RunSummary",
    "render_report",
    "summarize_runs",
    "write_report_json",
]
