"""boxpretrain CLI package."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import click

from . import (
    config_cmd,
    eval_cmd,
    finetune_cmd,
    gen_data,
    gen_proposals,
    pretrain_box,
    pretrain_image,
    report_cmd,
)
from ._common import CONTEXT_SETTINGS, EXIT_CONFIG, BoxptCliError

__all__ = ["cli", "main", "BoxptCliError"]


@click.group(context_settings=CONTEXT_SETTINGS, invoke_without_command=True)
@click.option(
    "-c",
    "--config",
    "config_path_opt",
    type=click.Path(path_type=Path),
    default=None,
    help="Path to a run configuration TOML file.",
)
@click.option(
    "-v", "--verbose", is_flag=True, default=False, help="Log debug messages."
)
@click.pass_context
def cli(ctx: click.Context, config_path_opt: Path | None, verbose: bool) -> None:
    """Box-domain pre-training pipeline for desk-scale detectors."""

    ctx.ensure_object(dict)
    invoked = ctx.invoked_subcommand

    if invoked is None:
        click.echo(ctx.command.get_help(ctx))
        ctx.exit(0)

    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    ctx.obj["config_path"] = config_path_opt


for register_command in (
    gen_data.register,
    gen_proposals.register,
    pretrain_image.register,
    pretrain_box.register,
    finetune_cmd.register,
    eval_cmd.register,
    report_cmd.register,
    config_cmd.register,
):
    register_command(cli)


def main(argv: Sequence[str] | None = None) -> int:
    """Run the CLI: 0 on success, 1 on configuration or usage errors, 2 otherwise."""

    args = list(argv) if argv is not None else None
    try:
        result = cli.main(args=args, prog_name="boxpt", standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return EXIT_CONFIG
    except click.ClickException as exc:
        click.echo(f"Error: {exc.format_message()}", err=True)
        return exc.exit_code
    except click.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_CONFIG
    except SystemExit as exc:
        return int(exc.code or 0)
    return result if isinstance(result, int) else 0
