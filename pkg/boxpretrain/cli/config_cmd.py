"""Config command for the boxpt CLI."""

from __future__ import annotations

from pathlib import Path

import click

from ..config import DEFAULT_CONFIG_PATH, bootstrap_config_file
from ..plugins import load_flavor_contributions
from ._common import COMMAND_SETTINGS, get_app, reporting_errors


@click.command(name="config", context_settings=COMMAND_SETTINGS)
@click.option(
    "--show",
    is_flag=True,
    default=False,
    help="Print the effective configuration and exit.",
)
@click.option(
    "--flavors",
    "list_flavors",
    is_flag=True,
    default=False,
    help="List available detector flavors and exit.",
)
@click.pass_context
def config(ctx: click.Context, show: bool, list_flavors: bool) -> None:
    """Write the default configuration file, or inspect the effective one."""

    if show or list_flavors:
        app = get_app(ctx)
        if show:
            for key, value in app.config.to_flat_dict().items():
                click.echo(f"{key} = {value!r}")
        if list_flavors:
            with reporting_errors():
                contributions = load_flavor_contributions(app.config)
            for flavor_id, contribution in sorted(contributions.items()):
                marker = "*" if flavor_id == app.flavor.flavor_id else " "
                click.echo(f"{marker} {flavor_id}\t{contribution.description}")
        return

    selected_path: Path | None = ctx.obj.get("config_path")
    effective_path = selected_path or DEFAULT_CONFIG_PATH
    if bootstrap_config_file(effective_path):
        click.echo(f"Created configuration at {effective_path}")
    else:
        click.echo(f"Configuration already exists at {effective_path}")


def register(cli: click.Group) -> None:
    """Register the command with the root CLI group."""

    cli.add_command(config)
