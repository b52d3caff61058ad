"""Synthetic dataset generation command."""

from __future__ import annotations

from pathlib import Path

import click

from ..data import generate_dataset
from ._common import COMMAND_SETTINGS, get_app, reporting_errors

TRAIN_SPLIT = 0
EVAL_SPLIT = 1


@click.command(name="gen-data", context_settings=COMMAND_SETTINGS)
@click.option(
    "-o",
    "--out",
    "out_dir",
    type=click.Path(path_type=Path, file_okay=False),
    required=True,
    help="Directory receiving the train/ and eval/ datasets.",
)
@click.option(
    "--spec",
    "spec_path",
    type=click.Path(path_type=Path, dir_okay=False),
    default=None,
    help="Configuration file describing the scenes (defaults to -c).",
)
@click.pass_context
def gen_data(ctx: click.Context, out_dir: Path, spec_path: Path | None) -> None:
    """Render multi-object scenes with their ground-truth boxes."""

    if spec_path is not None:
        ctx.obj["config_path"] = spec_path
    config = get_app(ctx).config

    with reporting_errors():
        train = generate_dataset(
            out_dir / "train",
            config.data,
            count=config.data.train_images,
            seed=config.seed,
            split=TRAIN_SPLIT,
        )
        held_out = generate_dataset(
            out_dir / "eval",
            config.data,
            count=config.data.eval_images,
            seed=config.seed,
            split=EVAL_SPLIT,
        )
    click.echo(
        f"Wrote {len(train)} train and {len(held_out)} eval images to {out_dir}"
    )


def register(cli: click.Group) -> None:
    cli.add_command(gen_data)
