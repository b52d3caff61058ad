"""Image-domain pre-training command."""

from __future__ import annotations

from pathlib import Path

import click

from ..checkpoint import save_checkpoint
from ..data import read_dataset
from ..services.pretrain import backbone_manifest, image_domain_pretrain
from ..utils.metrics import MetricsWriter
from ._common import COMMAND_SETTINGS, get_app, metrics_path, reporting_errors


@click.command(name="pretrain-image", context_settings=COMMAND_SETTINGS)
@click.option(
    "-d",
    "--dataset",
    "dataset_path",
    type=click.Path(path_type=Path),
    required=True,
    help="Dataset manifest (or its directory).",
)
@click.option(
    "-o",
    "--out",
    "out_dir",
    type=click.Path(path_type=Path, file_okay=False),
    required=True,
    help="Checkpoint directory for the backbone.",
)
@click.option(
    "--metrics",
    "metrics_file",
    type=click.Path(path_type=Path, dir_okay=False),
    default=None,
    help="Metrics CSV (default: <out>.csv beside the checkpoint).",
)
@click.pass_context
def pretrain_image(
    ctx: click.Context, dataset_path: Path, out_dir: Path, metrics_file: Path | None
) -> None:
    """Self-supervised whole-image pre-training of the backbone."""

    config = get_app(ctx).config

    with reporting_errors():
        dataset = read_dataset(dataset_path)
        with MetricsWriter(metrics_path(out_dir, metrics_file)) as writer:
            backbone = image_domain_pretrain(dataset, config, metrics=writer)
            steps = writer.rows
        save_checkpoint(out_dir, backbone_manifest(backbone, config, step=steps))

    click.echo(f"Saved image-domain backbone after {steps} steps to {out_dir}")


def register(cli: click.Group) -> None:
    cli.add_command(pretrain_image)
