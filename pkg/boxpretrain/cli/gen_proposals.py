"""Unsupervised proposal generation command."""

from __future__ import annotations

from pathlib import Path

import click

from ..data import read_dataset
from ..proposals import generate_proposals, write_proposals
from ._common import COMMAND_SETTINGS, get_app, reporting_errors


@click.command(name="gen-proposals", context_settings=COMMAND_SETTINGS)
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
    "out_path",
    type=click.Path(path_type=Path, dir_okay=False),
    required=True,
    help="Proposals file to write.",
)
@click.pass_context
def gen_proposals(ctx: click.Context, dataset_path: Path, out_path: Path) -> None:
    """Run selective search over every image of a dataset."""

    config = get_app(ctx).config

    with reporting_errors():
        dataset = read_dataset(dataset_path)
        proposal_sets = []
        with click.progressbar(
            dataset.images,
            label="Selective search",
            file=click.get_text_stream("stderr"),
        ) as records:
            for record in records:
                image = dataset.load_image(record)
                proposal_sets.append(
                    generate_proposals(image, config.proposals, image_id=record.id)
                )
        count = write_proposals(out_path, proposal_sets)

    total = sum(len(item.boxes) for item in proposal_sets)
    click.echo(f"Wrote {total} proposals for {count} images to {out_path}")


def register(cli: click.Group) -> None:
    cli.add_command(gen_proposals)
