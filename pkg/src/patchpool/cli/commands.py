"""Stage commands over the run store.

Each command is idempotent per instance: work whose output artifact already
exists is skipped unless forced, failures on one instance never abort the
others, and a rerun after a crash resumes unfinished machines from their
journals. Expensive units (one machine pair) are scheduled on a bounded
worker pool; artifact paths are unique per unit so writes never contend.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from patchpool.analytics import (
    InstanceRuns,
    SerialPair,
    coverage,
    render_gap_text,
    render_metric_summary,
    render_sweep_csv,
    selection_gap_report,
    sweep,
)
from patchpool.cli.config import RunConfig, config_doc
from patchpool.cli.store import RunStore, load_dataset
from patchpool.context import (
    RankedContext,
    assemble_context,
    compute_recall,
    rank_files,
    render_included_files,
    scan_relevance,
)
from patchpool.core import (
    CandidateSample,
    ContractViolation,
    Instance,
    TokenUsage,
    Trajectory,
    ZERO_USAGE,
    read_artifact,
    write_artifact,
)
from patchpool.llm import CostLedger, LiveBackend, MockBackendHub, format_ledger_text, render_ledger
from patchpool.machines import TrajectoryJournal, ensure_candidate_diffs, run_editing_machine, run_testing_machine
from patchpool.selection import (
    SelectionMethod,
    build_vote_matrix,
    ensemble_select,
    ingest_ensemble,
    prediction_record,
    select,
)
from patchpool.sandbox import evaluate_candidate

log = logging.getLogger(__name__)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


@dataclass
class CommandReport:
    """What one command did, unit by unit."""

    command: str
    completed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failed

    def exit_code(self) -> int:
        return 0 if self.ok else 1

    def render(self) -> str:
        lines = [
            f"{self.command}: {len(self.completed)} completed, "
            f"{len(self.skipped)} skipped, {len(self.failed)} failed"
        ]
        for label in sorted(self.failed):
            lines.append(f"  FAILED {label}: {self.failed[label]}")
        return "\n".join(lines)


class BackendProvider:
    """Hands stage code a backend for one playbook scope.

    Mock runs get per-scope consuming sessions from a shared hub (which also
    carries the concurrency gauge); live runs get a stateless HTTP backend
    whose model depends on the role: the cheap scanner model reads the whole
    repository, the primary model does everything else.
    """

    def __init__(self, config: RunConfig):
        self._config = config
        self.hub: MockBackendHub | None = None
        if config.backend.kind == "mock":
            self.hub = MockBackendHub(
                config.backend.playbook_dir, max_concurrency=config.backend.max_concurrency
            )

    def session(self, scope: str, role: str = "primary"):
        if self.hub is not None:
            return self.hub.session(scope)
        model = (
            self._config.backend.scanner_model
            if role == "scanner"
            else self._config.backend.primary_model
        )
        return LiveBackend(
            self._config.backend.api_url,
            model,
            auth_env_var=self._config.backend.api_key_env,
        )


def _select_instances(config: RunConfig, limit: int | None) -> list[Instance]:
    instances = load_dataset(config.dataset_dir)
    if limit is not None:
        if limit < 1:
            raise ContractViolation(f"--limit must be >= 1, got {limit}")
        instances = instances[:limit]
    return instances


def _open_store(config: RunConfig) -> RunStore:
    store = RunStore(config.store_root, config.run_id)
    store.sweep_tmp_files()
    store.write_config(config_doc(config))
    return store


def _run_units(
    report: CommandReport,
    units: Sequence[tuple[str, Callable[[], str]]],
    workers: int,
) -> None:
    """Run labeled units on a bounded pool, folding outcomes into the report."""
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {label: pool.submit(fn) for label, fn in units}
        for label, future in futures.items():
            try:
                status = future.result()
            except Exception as exc:
                log.warning("%s failed: %s", label, exc)
                report.failed[label] = str(exc)
            else:
                (report.skipped if status == "skipped" else report.completed).append(label)


# ---------------------------------------------------------------------------
# context
# ---------------------------------------------------------------------------


def cmd_context(config: RunConfig, force: bool = False, limit: int | None = None) -> CommandReport:
    """Scan, rank (repeated), and assemble the capped context per instance."""
    report = CommandReport("context")
    instances = _select_instances(config, limit)
    store = _open_store(config)
    provider = BackendProvider(config)
    # Instances run serially here; the relevance scan fans its chunk requests
    # out to the worker limit on its own.
    for instance in instances:
        iid = instance.instance_id
        path = store.context_path(iid)
        if path.exists() and not force:
            report.skipped.append(iid)
            continue
        try:
            scan = scan_relevance(
                instance,
                provider.session(f"{iid}/relevance", role="scanner"),
                chunk_tokens=config.scan_chunk_tokens,
                max_workers=config.workers,
                retry=config.retry,
            )
            backends = [
                provider.session(f"{iid}/ranking/rep{r}", role="scanner")
                for r in range(config.ranking_repetitions)
            ]
            ranking = rank_files(
                scan,
                backends,
                instance.issue_text,
                repetitions=config.ranking_repetitions,
                target_tokens=config.ranking_target_tokens,
                retry=config.retry,
            )
            context = assemble_context(ranking, cap=config.context_cap_tokens)
            recall = (
                compute_recall(context, instance.gold_edit_files)
                if instance.gold_edit_files
                else None
            )
            store.write_context(
                iid,
                {
                    "kind": "context_stage",
                    "schema_version": 1,
                    "instance_id": iid,
                    "scan": scan.to_doc(),
                    "ranking": ranking.to_doc(),
                    "context": context.to_doc(),
                    "recall": recall,
                },
            )
        except Exception as exc:
            log.warning("context failed for %s: %s", iid, exc)
            report.failed[iid] = str(exc)
        else:
            report.completed.append(iid)
    return report


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def _generate_unit(
    config: RunConfig,
    store: RunStore,
    provider: BackendProvider,
    instance: Instance,
    m: int,
    context: RankedContext,
    force: bool,
) -> str:
    iid = instance.instance_id
    testing_id = f"testing-{m:02d}"
    editing_id = f"editing-{m:02d}"
    testing_path = store.trajectory_path(iid, testing_id)
    editing_path = store.trajectory_path(iid, editing_id)
    if force:
        for p in (
            testing_path,
            editing_path,
            store.journal_path(iid, testing_id),
            store.journal_path(iid, editing_id),
        ):
            p.unlink(missing_ok=True)
    if testing_path.exists() and editing_path.exists():
        return "skipped"

    if testing_path.exists():
        seed = store.read_trajectory(iid, testing_id)
    else:
        seed = run_testing_machine(
            instance,
            provider.session(f"{iid}/testing/{m:02d}"),
            policy=config.sandbox,
            config=config.testing,
            trajectory_id=testing_id,
            journal=TrajectoryJournal(store.journal_path(iid, testing_id)),
            retry=config.retry,
        )
        store.write_trajectory(iid, seed)

    snapshot = seed.final_snapshot
    if snapshot is None or snapshot.test is None:
        # The pair cannot continue without a seed test; a marker artifact
        # records completion so reruns do not retry a dead pair forever.
        write_artifact(
            editing_path,
            {
                "kind": "editing_skipped",
                "schema_version": 1,
                "instance_id": iid,
                "trajectory_id": editing_id,
                "reason": f"testing machine ended {seed.terminal_status.value} without a test",
            },
        )
        return "completed"

    editing = run_editing_machine(
        instance,
        context,
        seed,
        provider.session(f"{iid}/editing/{m:02d}"),
        policy=config.sandbox,
        config=config.editing,
        trajectory_id=editing_id,
        journal=TrajectoryJournal(store.journal_path(iid, editing_id)),
        retry=config.retry,
    )
    store.write_trajectory(iid, editing)
    return "completed"


def _assemble_candidates(
    config: RunConfig, store: RunStore, instance: Instance, force: bool
) -> str:
    iid = instance.instance_id
    path = store.candidates_path(iid)
    if path.exists() and not force:
        return "skipped"
    samples: list[CandidateSample] = []
    for m in range(config.machines_per_instance):
        editing_id = f"editing-{m:02d}"
        doc = read_artifact(store.trajectory_path(iid, editing_id))
        if doc.get("kind") != "trajectory":
            continue
        trajectory = Trajectory.from_doc(doc)
        snapshot = trajectory.final_snapshot
        if snapshot is None or snapshot.edit is None or snapshot.edit.is_empty:
            continue
        samples.append(
            CandidateSample(
                instance_id=iid,
                candidate_id=f"gen-{m:02d}",
                edit=snapshot.edit,
                test=snapshot.test,
                source="native",
                trajectory_id=editing_id,
            )
        )
    # Diffs are rendered before persisting so the stored pool is what every
    # later consumer (prompts, exports) will see.
    ensure_candidate_diffs(instance, tuple(samples), config.sandbox)
    store.write_candidates(iid, samples)
    return "completed"


def cmd_generate(config: RunConfig, force: bool = False, limit: int | None = None) -> CommandReport:
    """Run the testing+editing machine pairs and assemble candidate pools."""
    report = CommandReport("generate")
    instances = _select_instances(config, limit)
    store = _open_store(config)
    provider = BackendProvider(config)

    runnable: list[tuple[Instance, RankedContext]] = []
    for instance in instances:
        iid = instance.instance_id
        if not store.context_path(iid).exists():
            report.failed[iid] = "missing prerequisite artifact: context"
            continue
        context_doc = store.read_context(iid)
        runnable.append((instance, RankedContext.from_doc(context_doc["context"])))

    units: list[tuple[str, Callable[[], str]]] = []
    for instance, context in runnable:
        for m in range(config.machines_per_instance):

            def unit(instance=instance, context=context, m=m) -> str:
                return _generate_unit(config, store, provider, instance, m, context, force)

            units.append((f"{instance.instance_id}/machine-{m:02d}", unit))
    _run_units(report, units, config.workers)

    failed_instances = {label.split("/")[0] for label in report.failed}
    for instance, _ in runnable:
        iid = instance.instance_id
        if iid in failed_instances:
            continue
        try:
            status = _assemble_candidates(config, store, instance, force)
        except Exception as exc:
            log.warning("candidate assembly failed for %s: %s", iid, exc)
            report.failed[f"{iid}/candidates"] = str(exc)
        else:
            if status == "completed":
                report.completed.append(f"{iid}/candidates")
            else:
                report.skipped.append(f"{iid}/candidates")
    return report


# ---------------------------------------------------------------------------
# select
# ---------------------------------------------------------------------------


def _context_text(store: RunStore, instance: Instance) -> str:
    path = store.context_path(instance.instance_id)
    if not path.exists():
        return ""
    doc = store.read_context(instance.instance_id)
    return render_included_files(instance, RankedContext.from_doc(doc["context"]))


def _ensure_matrix(config: RunConfig, store: RunStore, instance: Instance, force: bool):
    iid = instance.instance_id
    if store.matrix_path(iid).exists() and not force:
        return store.read_matrix(iid)
    candidates = store.read_candidates(iid)
    if not candidates:
        raise ContractViolation("candidate pool is empty")
    matrix = build_vote_matrix(
        instance,
        candidates,
        [c.test for c in candidates],
        policy=config.sandbox,
        max_workers=config.workers,
    )
    store.write_matrix(iid, matrix)
    return matrix


def _selection_pool(store: RunStore, instance_id: str, method: str) -> list[CandidateSample]:
    """The candidate sequence a method's selected_index refers to."""
    if method == "ensemble":
        return store.read_ensemble_pool(instance_id)
    return store.read_candidates(instance_id)


def _write_predictions(store: RunStore, method: str, instance_ids: Sequence[str]) -> None:
    records = []
    for iid in sorted(instance_ids):
        if not store.selection_path(iid, method).exists():
            continue
        report = store.read_selection(iid, method)
        records.append(prediction_record(report, _selection_pool(store, iid, method)))
    write_artifact(
        store.predictions_path(method),
        {
            "kind": "prediction_set",
            "schema_version": 1,
            "method": method,
            "records": records,
        },
    )


def cmd_select(
    config: RunConfig,
    method: str,
    force: bool = False,
    limit: int | None = None,
) -> CommandReport:
    """Vote, then pick one candidate per instance with the given method."""
    method = SelectionMethod(method).value
    report = CommandReport(f"select[{method}]")
    instances = _select_instances(config, limit)
    store = _open_store(config)
    provider = BackendProvider(config)

    units: list[tuple[str, Callable[[], str]]] = []
    for instance in instances:
        iid = instance.instance_id
        if not store.candidates_path(iid).exists():
            report.failed[iid] = "missing prerequisite artifact: candidates"
            continue

        def unit(instance=instance) -> str:
            iid = instance.instance_id
            selection_path = store.selection_path(iid, method)
            if force:
                selection_path.unlink(missing_ok=True)
                store.journal_path(iid, f"selection-{method}").unlink(missing_ok=True)
            if selection_path.exists():
                return "skipped"
            matrix = _ensure_matrix(config, store, instance, force)
            backend = None
            if method in ("model", "model_top3"):
                backend = provider.session(f"{iid}/single_select")
            elif method == "machine_top3":
                backend = provider.session(f"{iid}/selection")
            selection_report = select(
                instance,
                matrix,
                method,
                backend=backend,
                context_text=_context_text(store, instance) if backend is not None else "",
                policy=config.sandbox,
                config=config.selection,
                journal=TrajectoryJournal(store.journal_path(iid, f"selection-{method}")),
                top_k=config.selection_top_k,
                retry=config.retry,
            )
            store.write_selection(iid, method, selection_report)
            return "completed"

        units.append((iid, unit))
    _run_units(report, units, config.workers)
    _write_predictions(store, method, [i.instance_id for i in instances])
    return report


def cmd_ensemble_select(
    config: RunConfig,
    prediction_files: Sequence[Path],
    native_method: str = "machine_top3",
    force: bool = False,
    limit: int | None = None,
) -> CommandReport:
    """Pool native and external candidates, then run machine selection."""
    report = CommandReport("ensemble-select")
    instances = _select_instances(config, limit)
    store = _open_store(config)
    provider = BackendProvider(config)
    external_by_instance = ingest_ensemble([Path(p) for p in prediction_files])

    units: list[tuple[str, Callable[[], str]]] = []
    for instance in instances:
        iid = instance.instance_id
        missing = [
            name
            for name, path in (
                ("candidates", store.candidates_path(iid)),
                (f"selection/{native_method}", store.selection_path(iid, native_method)),
            )
            if not path.exists()
        ]
        if missing:
            report.failed[iid] = "missing prerequisite artifact: " + ", ".join(missing)
            continue

        def unit(instance=instance) -> str:
            iid = instance.instance_id
            selection_path = store.selection_path(iid, "ensemble")
            if force:
                selection_path.unlink(missing_ok=True)
                store.ensemble_pool_path(iid).unlink(missing_ok=True)
                store.journal_path(iid, "selection-ensemble").unlink(missing_ok=True)
            if selection_path.exists():
                return "skipped"
            candidates = store.read_candidates(iid)
            native_report = store.read_selection(iid, native_method)
            native = candidates[native_report.selected_index]
            external = external_by_instance.get(iid, [])
            # The report's selected_index points into this pool, so it is
            # persisted before the report that references it.
            store.write_ensemble_pool(iid, [native, *external])
            selection_report = ensemble_select(
                instance,
                native,
                external,
                provider.session(f"{iid}/ensemble"),
                policy=config.sandbox,
                config=config.selection,
                journal=TrajectoryJournal(store.journal_path(iid, "selection-ensemble")),
                retry=config.retry,
            )
            store.write_selection(iid, "ensemble", selection_report)
            return "completed"

        units.append((iid, unit))
    _run_units(report, units, config.workers)
    _write_predictions(store, "ensemble", [i.instance_id for i in instances])
    return report


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def _instance_pairs(config: RunConfig, store: RunStore, instance: Instance) -> InstanceRuns:
    pairs = []
    for m in range(config.machines_per_instance):
        testing_path = store.trajectory_path(instance.instance_id, f"testing-{m:02d}")
        editing_path = store.trajectory_path(instance.instance_id, f"editing-{m:02d}")
        if not testing_path.exists() or not editing_path.exists():
            continue
        editing_doc = read_artifact(editing_path)
        if editing_doc.get("kind") != "trajectory":
            continue
        pairs.append(
            SerialPair(
                testing=Trajectory.from_doc(read_artifact(testing_path)),
                editing=Trajectory.from_doc(editing_doc),
            )
        )
    return InstanceRuns(instance=instance, pairs=tuple(pairs))


def cmd_analyze(
    config: RunConfig,
    limit: int | None = None,
    sweep_ks: Sequence[int] | None = None,
    sweep_iterations: Sequence[int] | None = None,
) -> CommandReport:
    """Score the run: recall, coverage, per-method score, gap, optional sweep.

    Reads stage artifacts and the instance oracles; recomputes everything it
    writes, so rerunning after more stages refreshes the reports.
    """
    report = CommandReport("analyze")
    instances = _select_instances(config, limit)
    store = _open_store(config)

    correctness: dict[str, list[bool]] = {}
    recalls: list[bool] = []
    selections: dict[str, dict[str, int]] = {}
    method_correct: dict[str, dict[str, bool]] = {}
    analyzed: list[Instance] = []
    for instance in instances:
        iid = instance.instance_id
        if not store.candidates_path(iid).exists():
            report.failed[iid] = "missing prerequisite artifact: candidates"
            continue
        try:
            candidates = store.read_candidates(iid)
            flags = [
                evaluate_candidate(instance, c.edit, config.sandbox) for c in candidates
            ]
            native_ids = [c.candidate_id for c in candidates]
            recall = None
            if store.context_path(iid).exists():
                recall = store.read_context(iid).get("recall")
            selected: dict[str, dict[str, Any]] = {}
            for method in store.selection_methods(iid):
                sel = store.read_selection(iid, method)
                chosen = _selection_pool(store, iid, method)[sel.selected_index]
                if chosen.candidate_id in native_ids:
                    # Score native picks from the pool flags; only those
                    # can enter the gap report's vote-matrix framing.
                    index = native_ids.index(chosen.candidate_id)
                    selections.setdefault(method, {})[iid] = index
                    correct = bool(flags[index]) if flags else False
                else:
                    correct = evaluate_candidate(instance, chosen.edit, config.sandbox)
                method_correct.setdefault(method, {})[iid] = correct
                selected[method] = {
                    "index": sel.selected_index,
                    "candidate_id": chosen.candidate_id,
                    "correct": correct,
                }
        except Exception as exc:
            log.warning("analyze failed for %s: %s", iid, exc)
            report.failed[iid] = str(exc)
            continue
        correctness[iid] = flags
        if recall is not None:
            recalls.append(bool(recall))
        write_artifact(
            store.metrics_path(iid),
            {
                "kind": "instance_metrics",
                "schema_version": 1,
                "instance_id": iid,
                "recall": recall,
                "candidate_count": len(flags),
                "candidate_correctness": flags,
                "selected": selected,
            },
        )
        analyzed.append(instance)
        report.completed.append(iid)

    if not correctness:
        report.failed.setdefault("run", "no instance had candidates to analyze")
        return report

    metrics: dict[str, float] = {}
    if recalls:
        metrics["recall"] = sum(recalls) / len(recalls)
    metrics["coverage"] = coverage(correctness)
    for method in sorted(method_correct):
        verdicts = method_correct[method]
        if set(verdicts) != set(correctness):
            continue
        metrics[f"score[{method}]"] = sum(verdicts.values()) / len(correctness)
    complete_methods = {
        method: picks
        for method, picks in selections.items()
        if set(picks) == set(correctness)
    }

    write_artifact(
        store.reports_dir / "metrics.json",
        {"kind": "run_metrics", "schema_version": 1, "metrics": metrics},
    )
    summary = render_metric_summary(metrics)
    _write_text(store.reports_dir / "summary.txt", summary)
    if complete_methods:
        gap = selection_gap_report(correctness, complete_methods)
        _write_text(store.reports_dir / "gap.txt", render_gap_text(gap))
        write_artifact(store.reports_dir / "gap.json", gap.to_doc())

    if sweep_ks and sweep_iterations:
        runs = [r for r in (_instance_pairs(config, store, i) for i in analyzed) if r.pairs]
        points = sweep(
            runs,
            ks=list(sweep_ks),
            iterations=list(sweep_iterations),
            policy=config.sandbox,
            prices=config.prices,
        )
        _write_text(store.reports_dir / "sweep.csv", render_sweep_csv(points))
    return report


# ---------------------------------------------------------------------------
# costs
# ---------------------------------------------------------------------------


def cmd_costs(config: RunConfig, limit: int | None = None) -> CommandReport:
    """Recompute the per-stage cost ledger from stored artifacts alone."""
    report = CommandReport("costs")
    instances = _select_instances(config, limit)
    store = _open_store(config)
    ledger = CostLedger()
    for instance in instances:
        iid = instance.instance_id
        try:
            if store.context_path(iid).exists():
                doc = store.read_context(iid)
                ledger.record("relevance", TokenUsage.from_doc(doc["scan"]["usage"]))
                ledger.record("ranking", TokenUsage.from_doc(doc["ranking"]["usage"]))
            for trajectory_id in store.trajectory_ids(iid, "testing"):
                trajectory = store.read_trajectory(iid, trajectory_id)
                ledger.record("gen_tests", trajectory.usage_total)
            for trajectory_id in store.trajectory_ids(iid, "editing"):
                doc = read_artifact(store.trajectory_path(iid, trajectory_id))
                if doc.get("kind") != "trajectory":
                    continue
                ledger.record("gen_edits", Trajectory.from_doc(doc).usage_total)
            for method in store.selection_methods(iid):
                sel = store.read_selection(iid, method)
                usage = ZERO_USAGE
                if sel.trajectory is not None:
                    usage = usage + sel.trajectory.usage_total
                for turn in sel.turns:
                    usage = usage + turn.usage
                ledger.record("selection", usage)
        except Exception as exc:
            log.warning("costs failed for %s: %s", iid, exc)
            report.failed[iid] = str(exc)
        else:
            report.completed.append(iid)

    table = render_ledger(ledger, config.prices)
    write_artifact(
        store.ledger_dir / "costs.json",
        {
            "kind": "cost_ledger",
            "schema_version": 1,
            "grand_total_usd": table.grand_total_usd,
            "rows": [
                {
                    "stage": row.stage,
                    "input_usd": row.input_usd,
                    "output_usd": row.output_usd,
                    "cache_read_usd": row.cache_read_usd,
                    "cache_write_usd": row.cache_write_usd,
                    "local_usd": row.local_usd,
                    "total_usd": row.total_usd,
                    "percent": row.percent,
                }
                for row in table.rows
            ],
        },
    )
    _write_text(store.ledger_dir / "costs.txt", format_ledger_text(table))
    return report
