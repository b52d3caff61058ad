"""Hook specifications for boxpretrain plugins."""

from __future__ import annotations

from collections.abc import Iterable

from boxpretrain.config import RunConfig

from ._markers import hookspec
from .types import FlavorContribution


class BoxpretrainHookSpec:
    """Collection of pluggy hook specifications."""

    @hookspec
    def detector_flavors(self, config: RunConfig) -> Iterable[FlavorContribution]:
        """Return detector flavors (priors plus assignment rule) of the plugin."""
