"""Evaluation command."""

from __future__ import annotations

from pathlib import Path

import click

from ..checkpoint import load_checkpoint
from ..data import read_dataset
from ..services.finetune import evaluate_runs
from ._common import COMMAND_SETTINGS, get_app, reporting_errors


@click.command(name="eval", context_settings=COMMAND_SETTINGS)
@click.option(
    "-d",
    "--dataset",
    "dataset_path",
    type=click.Path(path_type=Path),
    required=True,
    help="Labeled evaluation manifest.",
)
@click.option(
    "-r",
    "--runs",
    "runs_dir",
    type=click.Path(path_type=Path, file_okay=False),
    required=True,
    help="Runs directory written by finetune.",
)
@click.option(
    "--pretrained",
    "pretrained_dir",
    type=click.Path(path_type=Path, file_okay=False),
    default=None,
    help="Box-domain checkpoint; also measures embedding purity.",
)
@click.pass_context
def evaluate(
    ctx: click.Context,
    dataset_path: Path,
    runs_dir: Path,
    pretrained_dir: Path | None,
) -> None:
    """Compute box AP for every fold and arm."""

    app = get_app(ctx)

    with reporting_errors():
        manifest = read_dataset(dataset_path)
        pretrained = (
            load_checkpoint(pretrained_dir, kind="box")
            if pretrained_dir is not None
            else None
        )
        results = evaluate_runs(
            runs_dir, manifest, app.config, flavor=app.flavor, pretrained=pretrained
        )

    for fold, reports in results.items():
        for arm, report in reports.items():
            click.echo(
                f"{fold} {arm}: AP {report.ap:.3f} "
                f"AP50 {report.ap50:.3f} AP75 {report.ap75:.3f}"
            )


def register(cli: click.Group) -> None:
    cli.add_command(evaluate)
