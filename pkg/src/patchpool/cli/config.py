"""Run configuration: a single JSON file describing dataset, store, stage
parameters, backends, prices, and worker limits.

Validation is accumulated: every problem in the file is reported in one
error, before any work starts. Relative paths resolve against the config
file's own directory so a run directory can be moved wholesale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from patchpool.core import ContractViolation
from patchpool.llm import PriceTable, RetryPolicy
from patchpool.machines import EDITING_DEFAULTS, SELECTION_DEFAULTS, TESTING_DEFAULTS, MachineConfig
from patchpool.sandbox import SandboxPolicy


class ConfigError(ContractViolation):
    """Raised with every validation problem joined into one message."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid run config:\n" + "\n".join(f"  - {p}" for p in problems))


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    playbook_dir: Path | None = None
    scanner_model: str = "scanner-small"
    primary_model: str = "primary-large"
    max_concurrency: int | None = None
    api_url: str = ""
    api_key_env: str = "PATCHPOOL_API_KEY"


@dataclass(frozen=True)
class RunConfig:
    run_id: str
    dataset_dir: Path
    store_root: Path
    workers: int = 4
    machines_per_instance: int = 10
    testing: MachineConfig = TESTING_DEFAULTS
    editing: MachineConfig = EDITING_DEFAULTS
    selection: MachineConfig = SELECTION_DEFAULTS
    selection_top_k: int = 3
    context_cap_tokens: int = 128_000
    ranking_target_tokens: int = 60_000
    ranking_repetitions: int = 3
    scan_chunk_tokens: int = 32_000
    sandbox: SandboxPolicy = field(default_factory=SandboxPolicy)
    backend: BackendConfig = field(default_factory=BackendConfig)
    prices: PriceTable = field(default_factory=PriceTable)
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    def __post_init__(self) -> None:
        problems = validate_config(self)
        if problems:
            raise ConfigError(problems)


def validate_config(config: RunConfig) -> list[str]:
    problems: list[str] = []
    if not config.run_id:
        problems.append("run_id must be nonempty")
    if config.workers < 1:
        problems.append(f"workers must be >= 1, got {config.workers}")
    if config.machines_per_instance < 1:
        problems.append(
            f"machines_per_instance must be >= 1, got {config.machines_per_instance}"
        )
    if config.selection_top_k < 1:
        problems.append(f"selection top_k must be >= 1, got {config.selection_top_k}")
    if config.context_cap_tokens < 1:
        problems.append("context cap must be positive")
    if config.ranking_target_tokens < 1:
        problems.append("ranking target must be positive")
    if config.ranking_repetitions < 1:
        problems.append("ranking repetitions must be >= 1")
    if config.backend.kind not in ("mock", "live"):
        problems.append(f"backend kind must be mock or live, got {config.backend.kind!r}")
    if config.backend.kind == "mock" and config.backend.playbook_dir is None:
        problems.append("mock backend requires playbook_dir")
    if config.backend.kind == "live" and not config.backend.api_url:
        problems.append("live backend requires api_url")
    if not config.backend.scanner_model or not config.backend.primary_model:
        problems.append("both scanner_model and primary_model must be named")
    return problems


def _machine_config(
    doc: dict[str, Any], defaults: MachineConfig, timeout_s: float, problems: list[str], label: str
) -> MachineConfig:
    try:
        return MachineConfig(
            max_completions=int(doc.get("max_completions", defaults.max_completions)),
            temperature=float(doc.get("temperature", defaults.temperature)),
            timeout_s=timeout_s,
            max_output_tokens=int(doc.get("max_output_tokens", defaults.max_output_tokens)),
        )
    except (ContractViolation, TypeError, ValueError) as exc:
        problems.append(f"{label}: {exc}")
        return defaults


def load_config(path: Path) -> RunConfig:
    """Parse and validate one run config file, reporting every problem."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from None
    if not isinstance(doc, dict):
        raise ConfigError(["config root must be a JSON object"])

    base = path.parent
    problems: list[str] = []

    def resolve(key: str, default: str | None = None) -> Path:
        raw = doc.get(key, default)
        if raw is None:
            problems.append(f"{key} is required")
            return base
        return (base / str(raw)).resolve()

    run_id = str(doc.get("run_id", "")).strip()
    dataset_dir = resolve("dataset_dir")
    store_root = resolve("store_root", "runs")

    sandbox_doc = doc.get("sandbox", {})
    timeout_s = float(sandbox_doc.get("timeout_s", 100.0))
    try:
        sandbox = SandboxPolicy(
            interpreter_cmd=tuple(sandbox_doc.get("interpreter_cmd", ("python3", "{script}"))),
            timeout_s=timeout_s,
        )
    except (ContractViolation, TypeError) as exc:
        problems.append(f"sandbox: {exc}")
        sandbox = SandboxPolicy()

    generation_doc = doc.get("generation", {})
    selection_doc = doc.get("selection", {})
    testing = _machine_config(generation_doc, TESTING_DEFAULTS, timeout_s, problems, "generation")
    editing = _machine_config(generation_doc, EDITING_DEFAULTS, timeout_s, problems, "generation")
    selection = _machine_config(selection_doc, SELECTION_DEFAULTS, timeout_s, problems, "selection")

    context_doc = doc.get("context", {})
    backend_doc = doc.get("backend", {})
    playbook_raw = backend_doc.get("playbook_dir")
    backend = BackendConfig(
        kind=str(backend_doc.get("kind", "mock")),
        playbook_dir=(base / str(playbook_raw)).resolve() if playbook_raw else None,
        scanner_model=str(backend_doc.get("scanner_model", "scanner-small")),
        primary_model=str(backend_doc.get("primary_model", "primary-large")),
        max_concurrency=backend_doc.get("max_concurrency"),
        api_url=str(backend_doc.get("api_url", "")),
        api_key_env=str(backend_doc.get("api_key_env", "PATCHPOOL_API_KEY")),
    )

    prices_doc = doc.get("prices", {})
    prices = PriceTable(
        input=float(prices_doc.get("input_usd_per_mtok", 3.00)),
        output=float(prices_doc.get("output_usd_per_mtok", 15.00)),
        cache_read=float(prices_doc.get("cache_read_usd_per_mtok", 0.30)),
        cache_write=float(prices_doc.get("cache_write_usd_per_mtok", 3.75)),
    )

    retry_doc = doc.get("retry", {})
    retry = RetryPolicy(
        max_attempts=int(retry_doc.get("max_attempts", 3)),
        base_delay=float(retry_doc.get("base_delay", 1.0)),
        factor=float(retry_doc.get("factor", 2.0)),
    )

    if problems:
        raise ConfigError(problems)
    try:
        config = RunConfig(
            run_id=run_id,
            dataset_dir=dataset_dir,
            store_root=store_root,
            workers=int(doc.get("workers", 4)),
            machines_per_instance=int(doc.get("machines_per_instance", 10)),
            testing=testing,
            editing=editing,
            selection=selection,
            selection_top_k=int(selection_doc.get("top_k", 3)),
            context_cap_tokens=int(context_doc.get("cap_tokens", 128_000)),
            ranking_target_tokens=int(context_doc.get("ranking_target_tokens", 60_000)),
            ranking_repetitions=int(context_doc.get("repetitions", 3)),
            scan_chunk_tokens=int(context_doc.get("scan_chunk_tokens", 32_000)),
            sandbox=sandbox,
            backend=backend,
            prices=prices,
            retry=retry,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError([str(exc)]) from exc
    if not dataset_dir.is_dir():
        raise ConfigError([f"dataset_dir does not exist: {dataset_dir}"])
    return config


def config_doc(config: RunConfig) -> dict[str, Any]:
    """Serializable copy of the effective config, stored with the run."""
    return {
        "kind": "run_config",
        "schema_version": 1,
        "run_id": config.run_id,
        "dataset_dir": str(config.dataset_dir),
        "store_root": str(config.store_root),
        "workers": config.workers,
        "machines_per_instance": config.machines_per_instance,
        "generation": {
            "max_completions": config.testing.max_completions,
            "temperature": config.testing.temperature,
        },
        "selection": {
            "max_completions": config.selection.max_completions,
            "temperature": config.selection.temperature,
            "top_k": config.selection_top_k,
        },
        "context": {
            "cap_tokens": config.context_cap_tokens,
            "ranking_target_tokens": config.ranking_target_tokens,
            "repetitions": config.ranking_repetitions,
            "scan_chunk_tokens": config.scan_chunk_tokens,
        },
        "sandbox": {
            "interpreter_cmd": list(config.sandbox.interpreter_cmd),
            "timeout_s": config.sandbox.timeout_s,
        },
        "backend": {
            "kind": config.backend.kind,
            "playbook_dir": str(config.backend.playbook_dir) if config.backend.playbook_dir else None,
            "scanner_model": config.backend.scanner_model,
            "primary_model": config.backend.primary_model,
            "max_concurrency": config.backend.max_concurrency,
        },
        "prices": {
            "input_usd_per_mtok": config.prices.input,
            "output_usd_per_mtok": config.prices.output,
            "cache_read_usd_per_mtok": config.prices.cache_read,
            "cache_write_usd_per_mtok": config.prices.cache_write,
        },
        "retry": {
            "max_attempts": config.retry.max_attempts,
            "base_delay": config.retry.base_delay,
            "factor": config.retry.factor,
        },
    }
