"""Report command."""

from __future__ import annotations

from pathlib import Path

import click

from ..services.report import render_report, summarize_runs, write_report_json
from ._common import CONTEXT_SETTINGS, reporting_errors

REPORT_JSON_FILENAME = "report.json"


@click.command(name="report", context_settings=CONTEXT_SETTINGS)
@click.option(
    "-r",
    "--runs",
    "runs_dir",
    type=click.Path(path_type=Path, file_okay=False),
    required=True,
    help="Evaluated runs directory.",
)
@click.option(
    "--json",
    "json_path",
    type=click.Path(path_type=Path, dir_okay=False),
    default=None,
    help=f"Where to write the summary (default: <runs>/{REPORT_JSON_FILENAME}).",
)
def report(runs_dir: Path, json_path: Path | None) -> None:
    """Print per-fold and mean results of the evaluated arms."""

    with reporting_errors():
        summary = summarize_runs(runs_dir)
        write_report_json(summary, json_path or runs_dir / REPORT_JSON_FILENAME)
        text = render_report(summary)

    click.echo(text, nl=False)


def register(cli: click.Group) -> None:
    cli.add_command(report)
