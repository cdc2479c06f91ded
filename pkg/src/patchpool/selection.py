"""Candidate selection: vote matrices, majority voting, top-k filtering,
single-turn model choice, selection-machine composition, and ingestion of
external prediction files for ensemble selection.

Everything downstream of the vote matrix is pure; all ordering rules share
one tie-break chain (pass count desc, diff length asc, candidate id asc) so
results are deterministic under any reordering of candidates or tests.
"""

from __future__ import annotations

import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Sequence

from patchpool.core import (
    EXIT_FIXED,
    EXIT_ISSUE_PRESENT,
    CandidateSample,
    ContractViolation,
    Edit,
    Instance,
    Role,
    TestScript,
    Trajectory,
    Turn,
    candidate_tie_break_key,
)
from patchpool.llm import Backend, BackendError, ChatMessage, ChatRequest, RetryPolicy, complete
from patchpool.machines import (
    SELECTION_DEFAULTS,
    MachineConfig,
    SelectionOutcome,
    TrajectoryJournal,
    ensure_candidate_diffs,
    run_selection_machine,
)
from patchpool.prompts import render
from patchpool.sandbox import (
    ApplyError,
    SandboxError,
    SandboxPolicy,
    apply_edit,
    edit_target_paths,
    materialize,
    run_script,
)

log = logging.getLogger(__name__)

_SELECT_LINE_RE = re.compile(r"select\s*:?\s*(\d+)", re.IGNORECASE)

DEFAULT_TOP_K = 3


class Outcome(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    ERROR = "error"
    TIMEOUT = "timeout"


def outcome_of_exit(exit_code: int | None, timed_out: bool) -> Outcome:
    """Exit-code taxonomy: 0 fixed, 2 issue present, anything else broken."""
    if timed_out:
        return Outcome.TIMEOUT
    if exit_code == EXIT_FIXED:
        return Outcome.PASS
    if exit_code == EXIT_ISSUE_PRESENT:
        return Outcome.FAIL
    return Outcome.ERROR


@dataclass(frozen=True)
class VoteMatrix:
    """Outcome of every (candidate, test) execution pair.

    Rows are candidates, columns tests. pass counts derive strictly from
    Outcome.PASS cells; errors and timeouts never count.
    """

    candidates: tuple[CandidateSample, ...]
    tests: tuple[TestScript, ...]
    outcomes: tuple[tuple[Outcome, ...], ...]

    def __post_init__(self) -> None:
        if len(self.outcomes) != len(self.candidates):
            raise ContractViolation(
                f"outcome rows ({len(self.outcomes)}) != candidates ({len(self.candidates)})"
            )
        for i, row in enumerate(self.outcomes):
            if len(row) != len(self.tests):
                raise ContractViolation(
                    f"outcome row {i} has {len(row)} cells for {len(self.tests)} tests"
                )

    @property
    def pass_counts(self) -> tuple[int, ...]:
        return tuple(sum(1 for o in row if o is Outcome.PASS) for row in self.outcomes)

    def to_doc(self) -> dict[str, Any]:
        return {
            "kind": "vote_matrix",
            "schema_version": 1,
            "candidates": [c.to_doc() for c in self.candidates],
            "tests": [t.to_doc() for t in self.tests],
            "outcomes": [[o.value for o in row] for row in self.outcomes],
            "pass_counts": list(self.pass_counts),
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "VoteMatrix":
        return cls(
            candidates=tuple(CandidateSample.from_doc(d) for d in doc["candidates"]),
            tests=tuple(TestScript.from_doc(d) for d in doc["tests"]),
            outcomes=tuple(
                tuple(Outcome(o) for o in row) for row in doc["outcomes"]
            ),
        )


def build_vote_matrix(
    instance: Instance,
    candidates: Sequence[CandidateSample],
    tests: Sequence[TestScript],
    policy: SandboxPolicy | None = None,
    max_workers: int = 8,
) -> VoteMatrix:
    """Run every test against every candidate's edited workspace.

    Each cell gets a fresh workspace with the candidate's edit applied. A
    candidate whose edit does not apply yields an all-error row; a cell
    whose infrastructure fails is marked error and the run continues.
    """
    if not candidates or not tests:
        raise ContractViolation("vote matrix needs at least one candidate and one test")
    policy = policy or SandboxPolicy()

    def probe_apply(candidate: CandidateSample) -> bool:
        with materialize(instance, policy) as ws:
            try:
                apply_edit(ws, candidate.edit)
            except (ApplyError, SandboxError):
                return False
        return True

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        applies = list(pool.map(probe_apply, candidates))

    def run_cell(pair: tuple[int, int]) -> tuple[int, int, Outcome]:
        i, j = pair
        try:
            with materialize(instance, policy) as ws:
                apply_edit(ws, candidates[i].edit)
                result = run_script(ws, tests[j], policy)
        except (SandboxError, OSError) as exc:
            log.warning("matrix cell (%d, %d) errored: %s", i, j, exc)
            return i, j, Outcome.ERROR
        return i, j, outcome_of_exit(result.exit_code, result.timed_out)

    pairs = [
        (i, j)
        for i in range(len(candidates))
        if applies[i]
        for j in range(len(tests))
    ]
    grid: list[list[Outcome]] = [
        [Outcome.ERROR] * len(tests) for _ in range(len(candidates))
    ]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for i, j, outcome in pool.map(run_cell, pairs):
            grid[i][j] = outcome

    return VoteMatrix(
        candidates=tuple(candidates),
        tests=tuple(tests),
        outcomes=tuple(tuple(row) for row in grid),
    )


def _ranked_indices(matrix: VoteMatrix) -> list[int]:
    counts = matrix.pass_counts
    return sorted(
        range(len(matrix.candidates)),
        key=lambda i: (-counts[i],) + candidate_tie_break_key(matrix.candidates[i]),
    )


def majority_winner(matrix: VoteMatrix) -> int:
    """Deployment rule: most tests passed, shorter diff, lexicographic id."""
    return _ranked_indices(matrix)[0]


def expected_majority_score(matrix: VoteMatrix, correctness: Sequence[bool]) -> float:
    """Analysis rule: expected correctness over the argmax set.

    When m candidates tie for the best pass count, picking uniformly among
    them scores (# correct in the tie)/m.
    """
    if len(correctness) != len(matrix.candidates):
        raise ContractViolation(
            f"correctness has {len(correctness)} flags for {len(matrix.candidates)} candidates"
        )
    counts = matrix.pass_counts
    best = max(counts)
    tied = [i for i, c in enumerate(counts) if c == best]
    return sum(1 for i in tied if correctness[i]) / len(tied)


def majority_vote(matrix: VoteMatrix, correctness: Sequence[bool] | None = None):
    """Winner index without correctness, expected score with it."""
    if correctness is None:
        return majority_winner(matrix)
    return expected_majority_score(matrix, correctness)


def top_k_filter(matrix: VoteMatrix, k: int = DEFAULT_TOP_K) -> tuple[int, ...]:
    """Original indices of the k best candidates, best first."""
    if k < 1:
        raise ContractViolation(f"k must be >= 1, got {k}")
    return tuple(_ranked_indices(matrix)[:k])


def pick_example_test(matrix: VoteMatrix) -> tuple[int, TestScript]:
    """The test of the best-ranked candidate that has one.

    External candidates carry no test, so the scan skips them; at least one
    test-bearing candidate is required.
    """
    for i in _ranked_indices(matrix):
        test = matrix.candidates[i].test
        if test is not None:
            return i, test
    raise ContractViolation("no candidate carries a test script")


def _shortest_diff_index(candidates: Sequence[CandidateSample]) -> int:
    return min(range(len(candidates)), key=lambda i: candidate_tie_break_key(candidates[i]))


@dataclass(frozen=True)
class SingleTurnChoice:
    """Result of one-shot model selection, with its conversation."""

    index: int
    fallback_used: bool
    turns: tuple[Turn, ...]

    def to_doc(self) -> dict[str, Any]:
        return {
            "kind": "single_turn_choice",
            "index": self.index,
            "fallback_used": self.fallback_used,
            "turns": [t.to_doc() for t in self.turns],
        }


def model_select_single_turn(
    instance: Instance,
    candidates: Sequence[CandidateSample],
    context_text: str,
    backend: Backend,
    policy: SandboxPolicy | None = None,
    retry: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
    max_output_tokens: int = 1024,
) -> SingleTurnChoice:
    """Ask for a candidate index in a single completion.

    One correction reprompt on a malformed or out-of-range reply; if that
    also fails, or the backend fails, fall back to the shortest diff and
    flag it.
    """
    if not candidates:
        raise ContractViolation("single-turn selection requires at least one candidate")
    ensure_candidate_diffs(instance, tuple(candidates), policy or SandboxPolicy())
    candidate_block = "\n\n".join(
        "candidate {i}:\n{diff}".format(
            i=i, diff=c.edit.unified_diff.rstrip() or "(edit could not be rendered as a diff)"
        )
        for i, c in enumerate(candidates)
    )
    prompt = render(
        "single_select",
        issue=instance.issue_text,
        context_block=context_text,
        candidate_block=candidate_block,
        max_index=len(candidates) - 1,
    )
    turns: list[Turn] = [Turn(role=Role.USER, content=prompt)]

    def ask() -> tuple[int | None, str]:
        request = ChatRequest(
            messages=tuple(ChatMessage(role=t.role.value, content=t.content) for t in turns),
            temperature=0.0,
            max_output_tokens=max_output_tokens,
        )
        completion = complete(request, backend, retry=retry, sleep=sleep)
        match = _SELECT_LINE_RE.search(completion.text)
        index: int | None = None
        reason = ""
        if match is None:
            reason = "no line of the form select: N found"
        else:
            index = int(match.group(1))
            if not 0 <= index < len(candidates):
                reason = (
                    f"select index {index} is out of range "
                    f"(valid indices: 0..{len(candidates) - 1})"
                )
                index = None
        turns.append(
            Turn(
                role=Role.ASSISTANT,
                content=completion.text,
                usage=completion.usage,
                parsed_action={"kind": "select", "selection": index} if index is not None else None,
            )
        )
        return index, reason

    try:
        index, reason = ask()
        if index is None:
            turns.append(Turn(role=Role.USER, content=render("correction", reason=reason)))
            index, reason = ask()
    except BackendError as exc:
        log.warning("single-turn selection backend failure: %s", exc)
        return SingleTurnChoice(
            index=_shortest_diff_index(candidates), fallback_used=True, turns=tuple(turns)
        )
    if index is None:
        return SingleTurnChoice(
            index=_shortest_diff_index(candidates), fallback_used=True, turns=tuple(turns)
        )
    return SingleTurnChoice(index=index, fallback_used=False, turns=tuple(turns))


class SelectionMethod(str, Enum):
    MAJORITY = "majority"
    MODEL = "model"
    MODEL_TOP3 = "model_top3"
    MACHINE_TOP3 = "machine_top3"
    ENSEMBLE = "ensemble"


@dataclass(frozen=True)
class SelectionReport:
    """Final pick for one instance with full provenance."""

    instance_id: str
    method: str
    selected_index: int
    selected_candidate_id: str
    filtered_indices: tuple[int, ...]
    fallback_used: bool = False
    trajectory: Trajectory | None = None
    turns: tuple[Turn, ...] = ()

    def to_doc(self) -> dict[str, Any]:
        return {
            "kind": "selection_report",
            "schema_version": 1,
            "instance_id": self.instance_id,
            "method": self.method,
            "selected_index": self.selected_index,
            "selected_candidate_id": self.selected_candidate_id,
            "filtered_indices": list(self.filtered_indices),
            "fallback_used": self.fallback_used,
            "trajectory": self.trajectory.to_doc() if self.trajectory else None,
            "turns": [t.to_doc() for t in self.turns],
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "SelectionReport":
        return cls(
            instance_id=doc["instance_id"],
            method=doc["method"],
            selected_index=doc["selected_index"],
            selected_candidate_id=doc["selected_candidate_id"],
            filtered_indices=tuple(doc["filtered_indices"]),
            fallback_used=doc["fallback_used"],
            trajectory=Trajectory.from_doc(doc["trajectory"]) if doc.get("trajectory") else None,
            turns=tuple(Turn.from_doc(d) for d in doc.get("turns", ())),
        )


def select(
    instance: Instance,
    matrix: VoteMatrix,
    method: SelectionMethod | str,
    backend: Backend | None = None,
    context_text: str = "",
    policy: SandboxPolicy | None = None,
    config: MachineConfig = SELECTION_DEFAULTS,
    journal: TrajectoryJournal | None = None,
    top_k: int = DEFAULT_TOP_K,
    retry: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> SelectionReport:
    """Pick a final candidate by the given method.

    All reported indices are positions in matrix.candidates, even when an
    intermediate stage filtered the pool.
    """
    method = SelectionMethod(method)
    policy = policy or SandboxPolicy()
    all_indices = tuple(range(len(matrix.candidates)))

    if method is SelectionMethod.MAJORITY:
        winner = majority_winner(matrix)
        return SelectionReport(
            instance_id=instance.instance_id,
            method=method.value,
            selected_index=winner,
            selected_candidate_id=matrix.candidates[winner].candidate_id,
            filtered_indices=all_indices,
        )

    if method in (SelectionMethod.MODEL, SelectionMethod.MODEL_TOP3):
        if backend is None:
            raise ContractViolation(f"method {method.value} requires a backend")
        if method is SelectionMethod.MODEL:
            filtered = all_indices
        else:
            filtered = top_k_filter(matrix, top_k)
        pool = [matrix.candidates[i] for i in filtered]
        choice = model_select_single_turn(
            instance, pool, context_text, backend, policy, retry=retry, sleep=sleep
        )
        original = filtered[choice.index]
        return SelectionReport(
            instance_id=instance.instance_id,
            method=method.value,
            selected_index=original,
            selected_candidate_id=matrix.candidates[original].candidate_id,
            filtered_indices=filtered,
            fallback_used=choice.fallback_used,
            turns=choice.turns,
        )

    if method is SelectionMethod.MACHINE_TOP3:
        if backend is None:
            raise ContractViolation(f"method {method.value} requires a backend")
        filtered = top_k_filter(matrix, top_k)
        _, example_test = pick_example_test(matrix)
        pool = tuple(matrix.candidates[i] for i in filtered)
        outcome = run_selection_machine(
            instance,
            pool,
            example_test,
            backend,
            policy,
            config,
            journal=journal,
            retry=retry,
            sleep=sleep,
        )
        original = filtered[outcome.selected_index]
        return SelectionReport(
            instance_id=instance.instance_id,
            method=method.value,
            selected_index=original,
            selected_candidate_id=matrix.candidates[original].candidate_id,
            filtered_indices=filtered,
            fallback_used=outcome.fallback_used,
            trajectory=outcome.trajectory,
        )

    raise ContractViolation(f"method {method.value} requires ensemble_select")


def ingest_ensemble(
    prediction_files: Sequence[Path],
) -> dict[str, list[CandidateSample]]:
    """Load external prediction files into per-instance candidate lists.

    Accepted shapes per file: a JSON array of {instance_id, patch,
    source_name} records, or a JSON object mapping instance_id to patch
    text (source_name defaults to the file stem). Records whose patch does
    not parse as a unified diff are dropped with a logged reason; duplicate
    patches across sources are kept with their own provenance.
    """
    pools: dict[str, list[CandidateSample]] = {}
    for file_path in prediction_files:
        file_path = Path(file_path)
        raw = json.loads(file_path.read_text(encoding="utf-8"))
        if isinstance(raw, dict):
            records = [
                {"instance_id": iid, "patch": patch, "source_name": file_path.stem}
                for iid, patch in sorted(raw.items())
            ]
        else:
            records = list(raw)
        per_source_seen: dict[tuple[str, str], int] = {}
        for record in records:
            instance_id = record.get("instance_id")
            patch = record.get("patch")
            source = record.get("source_name") or file_path.stem
            if not instance_id or not isinstance(patch, str):
                log.warning("dropping malformed record in %s: %r", file_path, record)
                continue
            edit = Edit.from_diff(patch)
            if not edit_target_paths(edit):
                log.warning(
                    "dropping unparseable patch for %s from %s", instance_id, source
                )
                continue
            ordinal = per_source_seen.get((instance_id, source), 0)
            per_source_seen[(instance_id, source)] = ordinal + 1
            suffix = "" if ordinal == 0 else f"-{ordinal + 1}"
            pools.setdefault(instance_id, []).append(
                CandidateSample(
                    instance_id=instance_id,
                    candidate_id=f"ext-{source}{suffix}",
                    edit=edit,
                    test=None,
                    source=source,
                )
            )
    return pools


def ensemble_select(
    instance: Instance,
    native: CandidateSample | None,
    external: Sequence[CandidateSample],
    backend: Backend,
    policy: SandboxPolicy | None = None,
    config: MachineConfig = SELECTION_DEFAULTS,
    journal: TrajectoryJournal | None = None,
    retry: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> SelectionReport:
    """Selection machine over a mixed native + external pool.

    No test-based filtering: every candidate goes straight to the machine.
    The example test comes from the native candidate, which must exist and
    carry a test; exhaustion reuses the standard fallback chain, flagged.
    """
    if native is None:
        raise ContractViolation(
            f"ensemble selection for {instance.instance_id} requires a native candidate"
        )
    if native.test is None:
        raise ContractViolation(
            f"native candidate {native.candidate_id} carries no example test"
        )
    pool = (native,) + tuple(external)
    outcome: SelectionOutcome = run_selection_machine(
        instance,
        pool,
        native.test,
        backend,
        policy,
        config,
        journal=journal,
        retry=retry,
        sleep=sleep,
    )
    return SelectionReport(
        instance_id=instance.instance_id,
        method=SelectionMethod.ENSEMBLE.value,
        selected_index=outcome.selected_index,
        selected_candidate_id=pool[outcome.selected_index].candidate_id,
        filtered_indices=tuple(range(len(pool))),
        fallback_used=outcome.fallback_used,
        trajectory=outcome.trajectory,
    )


def prediction_record(
    report: SelectionReport, candidates: Sequence[CandidateSample]
) -> dict[str, Any]:
    """Benchmark-submission record for one instance's final pick."""
    chosen = candidates[report.selected_index]
    return {
        "instance_id": report.instance_id,
        "patch": chosen.edit.unified_diff,
        "method": report.method,
        "provenance": {
            "candidate_id": chosen.candidate_id,
            "source": chosen.source,
            "filtered_indices": list(report.filtered_indices),
            "fallback_used": report.fallback_used,
            "trajectory_id": report.trajectory.trajectory_id if report.trajectory else None,
        },
    }
