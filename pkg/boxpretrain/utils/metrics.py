"""Per-step metrics CSV written by every training command."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from types import TracebackType

METRICS_HEADER = (
    "step",
    "loss_total",
    "loss_con",
    "loss_reg",
    "lr",
    "pos_count",
    "skipped_images",
)


@dataclass(slots=True)
class StepMetrics:
    """Scalars reported for one optimizer step.

    During fine-tuning ``loss_con`` carries the classification loss.
    """

    step: int
    loss_total: float
    loss_con: float
    loss_reg: float
    lr: float
    pos_count: int = 0
    skipped_images: int = 0
    loss_cls: float = 0.0
    pairs: int = 0

    def row(self) -> list[str]:
        return [
            str(self.step),
            f"{self.loss_total:.6f}",
            f"{self.loss_con:.6f}",
            f"{self.loss_reg:.6f}",
            f"{self.lr:g}",
            str(self.pos_count),
            str(self.skipped_images),
        ]


class MetricsWriter:
    """Append-only CSV writer; one row per executed step."""

    def __init__(self, path: Path, *, append: bool = False) -> None:
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not append or not path.exists() or path.stat().st_size == 0
        self._fh = path.open("a" if append else "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh)
        self.rows = 0
        if fresh:
            self._writer.writerow(METRICS_HEADER)
            self._fh.flush()

    def write(self, metrics: StepMetrics) -> None:
        self._writer.writerow(metrics.row())
        self._fh.flush()
        self.rows += 1

    def rewind(self, step: int) -> int:
        """Drop every row at or after ``step`` and return how many went.

        A resumed run rewinds to its checkpoint step before appending, so
        steps replayed after an aborted epoch are recorded once.
        """

        self._fh.flush()
        rows = read_metrics(self.path)
        kept = [row for row in rows if int(row["step"]) < step]
        self._fh.seek(0)
        self._fh.truncate()
        self._writer.writerow(METRICS_HEADER)
        for row in kept:
            self._writer.writerow([row[name] for name in METRICS_HEADER])
        self._fh.flush()
        return len(rows) - len(kept)

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        self.close()


def read_metrics(path: Path) -> list[dict[str, str]]:
    with path.open(encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


__all__ = ["METRICS_HEADER", "MetricsWriter", "StepMetrics", "read_metrics"]
