"""Discovery and lookup of detector flavors contributed through pluggy.

Each plugin module implements ``detector_flavors`` and returns one or more
:class:`FlavorContribution` descriptors. The registry keys flavors by their
case-folded id and remembers which plugin provided each one, so a clash
names both sides.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from functools import lru_cache

import pluggy

from ..config import ConfigError, RunConfig
from ._markers import ENTRY_POINT_GROUP, PLUGIN_NAMESPACE
from .spec import BoxpretrainHookSpec
from .types import FlavorContribution

logger = logging.getLogger(__name__)


class PluginRegistrationError(RuntimeError):
    """Raised when a plugin fails validation or registration."""


class UnknownFlavorError(ConfigError):
    """Raised when the configured flavor is not provided by any plugin."""


@dataclass(slots=True, frozen=True)
class FlavorEntry:
    contribution: FlavorContribution
    plugin: str


def flavor_key(flavor_id: str) -> str:
    return flavor_id.strip().lower()


class FlavorPluginManager:
    """pluggy manager holding the flavor hook, plus the flavor registry."""

    def __init__(self, *, load_entry_points: bool = True) -> None:
        self._manager = pluggy.PluginManager(PLUGIN_NAMESPACE)
        self._manager.add_hookspecs(BoxpretrainHookSpec)
        if load_entry_points:
            self._manager.load_setuptools_entrypoints(ENTRY_POINT_GROUP)

    @property
    def manager(self) -> pluggy.PluginManager:
        return self._manager

    def register_modules(self, modules: Sequence[object]) -> None:
        for module in modules:
            try:
                self._manager.register(module)
            except (pluggy.PluginValidationError, ValueError) as exc:
                raise PluginRegistrationError(str(exc)) from exc

    def flavors(self, config: RunConfig) -> dict[str, FlavorEntry]:
        """Ask every plugin for its flavors and validate what comes back."""

        entries: dict[str, FlavorEntry] = {}
        for impl in self._manager.hook.detector_flavors.get_hookimpls():
            returned = impl.function(config=config)
            for contribution in _contributions(returned, impl.plugin_name):
                key = flavor_key(contribution.flavor_id)
                if key in entries:
                    raise PluginRegistrationError(
                        f"Duplicate detector flavor '{contribution.flavor_id}' "
                        f"from plugin '{impl.plugin_name}'; already provided by "
                        f"'{entries[key].plugin}'."
                    )
                entries[key] = FlavorEntry(contribution, impl.plugin_name)
        return entries

    def resolve(self, config: RunConfig) -> FlavorContribution:
        entries = self.flavors(config)
        entry = entries.get(flavor_key(config.flavor))
        if entry is None:
            available = ", ".join(sorted(entries)) or "none"
            raise UnknownFlavorError(
                f"Unknown detector flavor: {config.flavor}. Available: {available}."
            )
        logger.debug(
            "detector flavor '%s' provided by %s",
            entry.contribution.flavor_id,
            entry.plugin,
        )
        return entry.contribution


def _contributions(returned: object, plugin: str) -> tuple[FlavorContribution, ...]:
    if not returned:
        return ()
    if isinstance(returned, FlavorContribution):
        returned = (returned,)
    if not isinstance(returned, Iterable) or isinstance(returned, (str, bytes)):
        raise PluginRegistrationError(
            f"Plugin '{plugin}' did not return an iterable of flavors."
        )

    checked: list[FlavorContribution] = []
    for item in returned:
        if not isinstance(item, FlavorContribution):
            raise PluginRegistrationError(
                f"Plugin '{plugin}' returned {type(item).__name__}; flavors must "
                "be FlavorContribution instances."
            )
        if not flavor_key(item.flavor_id):
            raise PluginRegistrationError(
                f"Plugin '{plugin}' returned a flavor without an id."
            )
        if item.priors_per_location < 1:
            raise PluginRegistrationError(
                f"Flavor '{item.flavor_id}' needs at least one prior per location."
            )
        hooks = (item.prior_boxes, item.assign, item.sample_cap)
        if not all(callable(hook) for hook in hooks):
            raise PluginRegistrationError(
                f"Flavor '{item.flavor_id}' must provide callable priors, "
                "assignment and sampling cap."
            )
        checked.append(item)
    return tuple(checked)


@lru_cache(maxsize=1)
def _builtin_plugin_modules() -> tuple[object, ...]:
    from . import anchor, point, query

    return (anchor, point, query)


@lru_cache(maxsize=1)
def _shared_plugin_manager() -> FlavorPluginManager:
    manager = FlavorPluginManager()
    manager.register_modules(_builtin_plugin_modules())
    return manager


def get_plugin_manager() -> FlavorPluginManager:
    return _shared_plugin_manager()


def reset_plugin_manager_cache() -> None:
    _shared_plugin_manager.cache_clear()


def load_flavor_contributions(config: RunConfig) -> dict[str, FlavorContribution]:
    """Every registered flavor keyed by its case-folded id."""

    entries = get_plugin_manager().flavors(config)
    return {key: entry.contribution for key, entry in entries.items()}


def resolve_flavor(config: RunConfig) -> FlavorContribution:
    """Return the contribution for ``config.flavor``, matched case-insensitively."""

    return get_plugin_manager().resolve(config)


__all__ = [
    "FlavorEntry",
    "FlavorPluginManager",
    "PluginRegistrationError",
    "UnknownFlavorError",
    "flavor_key",
    "get_plugin_manager",
    "load_flavor_contributions",
    "reset_plugin_manager_cache",
    "resolve_flavor",
]
