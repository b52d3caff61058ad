"""Paired fine-tuning command."""

from __future__ import annotations

from pathlib import Path

import click

from ..checkpoint import load_checkpoint
from ..data import read_dataset
from ..services.finetune import run_paired_finetune
from ._common import COMMAND_SETTINGS, get_app, reporting_errors


@click.command(name="finetune", context_settings=COMMAND_SETTINGS)
@click.option(
    "-d",
    "--dataset",
    "dataset_path",
    type=click.Path(path_type=Path),
    required=True,
    help="Labeled training manifest.",
)
@click.option(
    "-o",
    "--out",
    "runs_dir",
    type=click.Path(path_type=Path, file_okay=False),
    required=True,
    help="Runs directory receiving fold-<i>/<arm>/.",
)
@click.option(
    "--pretrained",
    "pretrained_dir",
    type=click.Path(path_type=Path, file_okay=False),
    default=None,
    help="Box-domain checkpoint; adds the pre-trained arm.",
)
@click.pass_context
def finetune(
    ctx: click.Context,
    dataset_path: Path,
    runs_dir: Path,
    pretrained_dir: Path | None,
) -> None:
    """Fine-tune pre-trained and random arms on the same low-data folds."""

    app = get_app(ctx)

    with reporting_errors():
        train = read_dataset(dataset_path)
        pretrained = (
            load_checkpoint(pretrained_dir, kind="box")
            if pretrained_dir is not None
            else None
        )
        runs = run_paired_finetune(
            train, app.config, runs_dir, flavor=app.flavor, pretrained=pretrained
        )

    for run in runs:
        click.echo(
            f"fold-{run.fold} {run.arm}: final loss {run.result.loss_at(1.0):.4f}"
        )


def register(cli: click.Group) -> None:
    cli.add_command(finetune)
