"""Shared helpers for boxpretrain CLI commands."""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Sequence

import click

from ..app import AppContext, bootstrap
from ..assign import AssignmentError
from ..checkpoint import CheckpointError
from ..config import ConfigError, MissingConfigError, RunConfig
from ..data import DatasetError
from ..evaluation import EvaluationError
from ..losses import LossError
from ..netcore import NetcoreError
from ..plugins import PluginRegistrationError
from ..proposals import ProposalError
from ..services.finetune import FinetuneError
from ..services.pretrain import TrainingError
from ..services.report import ReportError

CONTEXT_SETTINGS: dict[str, Any] = {"help_option_names": ["-h", "--help"]}
COMMAND_SETTINGS: dict[str, Any] = {
    **CONTEXT_SETTINGS,
    "allow_extra_args": True,
    "ignore_unknown_options": True,
}

EXIT_CONFIG = 1
EXIT_RUNTIME = 2

RUNTIME_ERRORS: tuple[type[Exception], ...] = (
    AssignmentError,
    CheckpointError,
    DatasetError,
    EvaluationError,
    FinetuneError,
    LossError,
    NetcoreError,
    PluginRegistrationError,
    ProposalError,
    ReportError,
    TrainingError,
)


class BoxptCliError(click.ClickException):
    """Shared Click exception wrapper carrying the process exit code."""

    def __init__(self, message: str, *, exit_code: int = EXIT_RUNTIME) -> None:
        super().__init__(message)
        self.exit_code = exit_code


def parse_overrides(ctx: click.Context, args: Sequence[str]) -> dict[str, str]:
    """Turn ``--section.key VALUE`` / ``--section.key=VALUE`` into overrides."""

    known = set(RunConfig().to_flat_dict())
    overrides: dict[str, str] = {}
    tokens = list(args)
    while tokens:
        token = tokens.pop(0)
        if not token.startswith("--"):
            raise click.UsageError(f"Got unexpected extra argument ({token})", ctx=ctx)
        key, sep, value = token[2:].partition("=")
        if key not in known:
            raise click.UsageError(f"No such option: --{key}", ctx=ctx)
        if not sep:
            if not tokens or tokens[0].startswith("--"):
                raise click.UsageError(f"Option '--{key}' requires a value", ctx=ctx)
            value = tokens.pop(0)
        overrides[key] = value
    return overrides


def get_app(ctx: click.Context) -> AppContext:
    """Return a cached AppContext for the current CLI invocation."""

    app: AppContext | None = ctx.obj.get("app")
    if app is not None:
        return app

    config_path: Path | None = ctx.obj.get("config_path")
    overrides = parse_overrides(ctx, ctx.args)
    try:
        app = bootstrap(config_path, overrides)
    except MissingConfigError as exc:
        raise BoxptCliError(
            f"{exc}. Run 'boxpt config' to write a default configuration.",
            exit_code=EXIT_CONFIG,
        ) from exc
    except ConfigError as exc:
        raise BoxptCliError(str(exc), exit_code=EXIT_CONFIG) from exc
    except PluginRegistrationError as exc:  # pragma: no cover - broken plugin
        raise BoxptCliError(str(exc)) from exc

    ctx.obj["app"] = app
    return app


@contextmanager
def reporting_errors() -> Iterator[None]:
    """Map library errors to CLI errors with the matching exit code."""

    try:
        yield
    except ConfigError as exc:
        raise BoxptCliError(str(exc), exit_code=EXIT_CONFIG) from exc
    except RUNTIME_ERRORS as exc:
        raise BoxptCliError(str(exc)) from exc


def metrics_path(out: Path, explicit: Path | None) -> Path:
    """Metrics CSV next to (not inside) a checkpoint directory by default."""

    return explicit if explicit is not None else out.with_name(f"{out.name}.csv")
