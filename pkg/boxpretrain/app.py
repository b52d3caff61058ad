"""Application bootstrap and context container for boxpretrain."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .config import RunConfig, load_config
from .plugins import FlavorContribution, resolve_flavor


@dataclass(slots=True)
class AppContext:
    """Aggregates the run configuration and the selected detector flavor."""

    config: RunConfig
    flavor: FlavorContribution


def bootstrap(
    config_path: Path | None, overrides: Mapping[str, str] | None = None
) -> AppContext:
    """Load configuration, apply CLI overrides and resolve the flavor plugin."""

    # Defer error mapping to the CLI, which knows how to present messages.
    config = load_config(config_path, overrides)
    return AppContext(config=config, flavor=resolve_flavor(config))
