"""Detector-flavor plugin infrastructure based on pluggy."""

from __future__ import annotations

from ._markers import ENTRY_POINT_GROUP, PLUGIN_NAMESPACE, hookimpl, hookspec
from .manager import (
    FlavorEntry,
    FlavorPluginManager,
    PluginRegistrationError,
    UnknownFlavorError,
    flavor_key,
    get_plugin_manager,
    load_flavor_contributions,
    reset_plugin_manager_cache,
    resolve_flavor,
)
from .types import AssignRequest, FlavorContribution, PriorGrid

__all__ = [
    "AssignRequest",
    "ENTRY_POINT_GROUP",
    "FlavorContribution",
    "FlavorEntry",
    "FlavorPluginManager",
    "PLUGIN_NAMESPACE",
    "PluginRegistrationError",
    "PriorGrid",
    "UnknownFlavorError",
    "flavor_key",
    "get_plugin_manager",
    "hookimpl",
    "hookspec",
    "load_flavor_contributions",
    "reset_plugin_manager_cache",
    "resolve_flavor",
]
