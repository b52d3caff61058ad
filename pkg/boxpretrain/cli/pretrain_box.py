"""Box-domain pre-training command."""

from __future__ import annotations

from pathlib import Path

import click

from ..checkpoint import load_checkpoint
from ..data import read_dataset
from ..proposals import read_proposals
from ..services.pretrain import run_box_pretrain
from ..utils.metrics import MetricsWriter
from ._common import COMMAND_SETTINGS, get_app, metrics_path, reporting_errors


@click.command(name="pretrain-box", context_settings=COMMAND_SETTINGS)
@click.option(
    "-d",
    "--dataset",
    "dataset_path",
    type=click.Path(path_type=Path),
    required=True,
    help="Dataset manifest (or its directory).",
)
@click.option(
    "-p",
    "--proposals",
    "proposals_path",
    type=click.Path(path_type=Path, dir_okay=False),
    required=True,
    help="Proposals file from gen-proposals.",
)
@click.option(
    "-b",
    "--backbone",
    "backbone_dir",
    type=click.Path(path_type=Path, file_okay=False),
    required=True,
    help="Image-domain checkpoint directory.",
)
@click.option(
    "-o",
    "--out",
    "out_dir",
    type=click.Path(path_type=Path, file_okay=False),
    required=True,
    help="Checkpoint directory for the box-domain run.",
)
@click.option(
    "--resume",
    is_flag=True,
    default=False,
    help="Continue from the checkpoint already at --out.",
)
@click.option(
    "--metrics",
    "metrics_file",
    type=click.Path(path_type=Path, dir_okay=False),
    default=None,
    help="Metrics CSV (default: <out>.csv beside the checkpoint).",
)
@click.pass_context
def pretrain_box(
    ctx: click.Context,
    dataset_path: Path,
    proposals_path: Path,
    backbone_dir: Path,
    out_dir: Path,
    resume: bool,
    metrics_file: Path | None,
) -> None:
    """Align the neck and head to the backbone on unlabeled proposals."""

    app = get_app(ctx)

    with reporting_errors():
        dataset = read_dataset(dataset_path)
        proposals = read_proposals(proposals_path, dataset.image_sizes())
        backbone = load_checkpoint(backbone_dir)
        target = metrics_path(out_dir, metrics_file)
        with MetricsWriter(target, append=resume) as writer:
            manifest = run_box_pretrain(
                dataset,
                proposals,
                app.config,
                flavor=app.flavor,
                backbone=backbone,
                out_dir=out_dir,
                resume=resume,
                metrics=writer,
            )

    click.echo(
        f"Saved {app.flavor.flavor_id} box-domain checkpoint "
        f"(epoch {manifest.epoch}, step {manifest.step}) to {out_dir}"
    )


def register(cli: click.Group) -> None:
    cli.add_command(pretrain_box)
