"""Run orchestration: config, durable store, stage commands, entry point."""

from patchpool.cli.commands import (
    BackendProvider,
    CommandReport,
    cmd_analyze,
    cmd_context,
    cmd_costs,
    cmd_ensemble_select,
    cmd_generate,
    cmd_select,
)
from patchpool.cli.config import BackendConfig, ConfigError, RunConfig, config_doc, load_config
from patchpool.cli.store import RunStore, load_dataset

__all__ = [
    "BackendConfig",
    "BackendProvider",
    "CommandReport",
    "ConfigError",
    "RunConfig",
    "RunStore",
    "cmd_analyze",
    "cmd_context",
    "cmd_costs",
    "cmd_ensemble_select",
    "cmd_generate",
    "cmd_select",
    "config_doc",
    "load_config",
    "load_dataset",
]
