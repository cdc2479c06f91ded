"""Offline analytics over persisted runs: coverage, subset estimators, the
serial x parallel scaling sweep, and the selection-gap report.

Everything here is a pure function of stored artifacts plus the instance
oracles; a fixed sampling seed keeps large-n subset estimates reproducible.
"""

from __future__ import annotations

import itertools
import logging
import math
import random
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

from patchpool.core import (
    ContractViolation,
    Edit,
    Instance,
    IterationSnapshot,
    TestScript,
    Trajectory,
    canonical_json,
)
from patchpool.llm import PriceTable, usage_cost
from patchpool.sandbox import (
    ApplyError,
    SandboxError,
    SandboxPolicy,
    apply_edit,
    evaluate_candidate,
    materialize,
    run_script,
)
from patchpool.selection import Outcome, outcome_of_exit

log = logging.getLogger(__name__)

ENUMERATION_LIMIT_N = 12
MIN_SAMPLED_SUBSETS = 1000


def coverage(correctness: Mapping[str, Sequence[bool]]) -> float:
    """Fraction of instances where at least one candidate is correct."""
    if not correctness:
        raise ContractViolation("coverage requires at least one instance")
    hits = sum(1 for flags in correctness.values() if any(flags))
    return hits / len(correctness)


def coverage_at_k_single(n: int, c: int, k: int) -> float:
    """Unbiased probability a random k-subset of n candidates hits a correct one.

    1 - C(n-c, k)/C(n, k), exact integer combinatorics.
    """
    if k < 1:
        raise ContractViolation(f"k must be >= 1, got {k}")
    if k > n:
        raise ContractViolation(f"k={k} exceeds candidate count n={n}")
    if not 0 <= c <= n:
        raise ContractViolation(f"correct count c={c} outside [0, {n}]")
    return 1.0 - math.comb(n - c, k) / math.comb(n, k)


def coverage_at_k(counts: Mapping[str, tuple[int, int]], k: int) -> float:
    """Average the per-instance subset estimator; counts maps id -> (n, c)."""
    if not counts:
        raise ContractViolation("coverage_at_k requires at least one instance")
    total = 0.0
    for instance_id, (n, c) in counts.items():
        try:
            total += coverage_at_k_single(n, c, k)
        except ContractViolation as exc:
            raise ContractViolation(f"instance {instance_id}: {exc}") from exc
    return total / len(counts)


def truncate_at_iteration(trajectory: Trajectory, i: int) -> IterationSnapshot | None:
    """Artifacts as they stood after completion i.

    An approved machine is frozen at its approval point for larger i; a
    trajectory with no snapshots (interrupted before any completion) yields
    None.
    """
    if i < 1:
        raise ContractViolation(f"iteration index must be >= 1, got {i}")
    if not trajectory.iteration_snapshots:
        return None
    index = min(i, trajectory.completions_used)
    return trajectory.iteration_snapshots[index - 1]


def expected_subset_majority_score(
    outcomes: Sequence[Sequence[Any]],
    correctness: Sequence[bool],
    k: int,
    seed: int = 0,
    enumeration_limit: int = ENUMERATION_LIMIT_N,
    samples: int = MIN_SAMPLED_SUBSETS,
) -> float:
    """Expected majority-vote score over size-k subsets of machine pairs.

    The matrix must be square and pair-coupled: row i and column i come from
    the same machine pair, so a subset keeps the same indices on both axes.
    Within a subset the argmax-by-pass-count tie resolves uniformly at
    random, scoring (#correct in tie)/|tie|. All C(n,k) subsets are
    enumerated up to n = enumeration_limit; beyond that, `samples` seeded
    draws.
    """
    n = len(outcomes)
    if n == 0:
        raise ContractViolation("subset score requires a nonempty matrix")
    for row in outcomes:
        if len(row) != n:
            raise ContractViolation("subset score requires a square pair-coupled matrix")
    if len(correctness) != n:
        raise ContractViolation(
            f"correctness has {len(correctness)} flags for {n} matrix rows"
        )
    if not 1 <= k <= n:
        raise ContractViolation(f"k={k} outside [1, {n}]")

    def subset_score(subset: Sequence[int]) -> float:
        counts = {
            i: sum(1 for j in subset if outcomes[i][j] == Outcome.PASS) for i in subset
        }
        best = max(counts.values())
        tied = [i for i in subset if counts[i] == best]
        return sum(1 for i in tied if correctness[i]) / len(tied)

    if n <= enumeration_limit:
        subsets = list(itertools.combinations(range(n), k))
    else:
        rng = random.Random(seed)
        subsets = [tuple(sorted(rng.sample(range(n), k))) for _ in range(samples)]
    return sum(subset_score(s) for s in subsets) / len(subsets)


@dataclass(frozen=True)
class SerialPair:
    """One serial chain of compute: a testing machine and its editing machine."""

    testing: Trajectory
    editing: Trajectory


@dataclass(frozen=True)
class InstanceRuns:
    """Everything the sweep needs for one instance."""

    instance: Instance
    pairs: tuple[SerialPair, ...]


@dataclass(frozen=True)
class SweepPoint:
    k_machines: int
    i_iterations: int
    coverage: float
    score: float
    estimated_cost_usd: float

    def __post_init__(self) -> None:
        if self.k_machines < 1 or self.i_iterations < 1:
            raise ContractViolation("sweep point axes are 1-based")

    def to_doc(self) -> dict[str, Any]:
        return {
            "k_machines": self.k_machines,
            "i_iterations": self.i_iterations,
            "coverage": self.coverage,
            "score": self.score,
            "estimated_cost_usd": self.estimated_cost_usd,
        }


class _TruncationEvaluator:
    """Oracle correctness and test outcomes for truncated artifacts, cached
    by content so frozen (approved) machines are never re-executed."""

    def __init__(self, instance: Instance, policy: SandboxPolicy) -> None:
        self.instance = instance
        self.policy = policy
        self._correct: dict[str, bool] = {}
        self._cells: dict[tuple[str, str], Outcome] = {}

    def correctness(self, edit: Edit) -> bool:
        key = canonical_json(edit.to_doc())
        if key not in self._correct:
            self._correct[key] = evaluate_candidate(self.instance, edit, self.policy)
        return self._correct[key]

    def cell(self, edit: Edit, test: TestScript) -> Outcome:
        key = (canonical_json(edit.to_doc()), canonical_json(test.to_doc()))
        if key not in self._cells:
            self._cells[key] = self._run_cell(edit, test)
        return self._cells[key]

    def _run_cell(self, edit: Edit, test: TestScript) -> Outcome:
        try:
            with materialize(self.instance, self.policy) as ws:
                try:
                    apply_edit(ws, edit)
                except ApplyError:
                    return Outcome.ERROR
                result = run_script(ws, test, self.policy)
        except (SandboxError, OSError) as exc:
            log.warning("sweep cell errored on %s: %s", self.instance.instance_id, exc)
            return Outcome.ERROR
        return outcome_of_exit(result.exit_code, result.timed_out)


def _pair_cost_usd(pair: SerialPair, i: int, prices: PriceTable) -> float:
    usage = pair.testing.usage_through_completion(i) + pair.editing.usage_through_completion(i)
    return usage_cost(usage, prices)


def sweep(
    runs: Sequence[InstanceRuns],
    ks: Sequence[int],
    iterations: Sequence[int],
    policy: SandboxPolicy | None = None,
    prices: PriceTable | None = None,
    seed: int = 0,
) -> list[SweepPoint]:
    """Coverage, majority-vote score, and cost across (k machines, i iterations).

    For each i, every editing trajectory is truncated to its state after
    completion i; truncated edits are scored by the instance oracle and a
    truncated pair-coupled vote matrix is rebuilt from the truncated tests.
    Coverage uses the subset estimator, score the expected majority vote
    over k-subsets, and cost the recorded usage of completions <= i in both
    machines of each pair, scaled by k/n for the expected k-machine spend.
    Instances with missing snapshots are excluded and counted in a warning.
    """
    if not runs:
        raise ContractViolation("sweep requires at least one instance run")
    policy = policy or SandboxPolicy()
    prices = prices or PriceTable()
    for r in runs:
        if not r.pairs:
            raise ContractViolation(f"instance {r.instance.instance_id} has no machine pairs")
    min_n = min(len(r.pairs) for r in runs)
    for k in ks:
        if not 1 <= k <= min_n:
            raise ContractViolation(
                f"k={k} outside [1, {min_n}] (smallest instance pool)"
            )
    evaluators = {
        r.instance.instance_id: _TruncationEvaluator(r.instance, policy) for r in runs
    }

    points: list[SweepPoint] = []
    for i in iterations:
        flags_by_instance: dict[str, list[bool]] = {}
        grid_by_instance: dict[str, list[list[Outcome]]] = {}
        cost_by_instance: dict[str, float] = {}
        excluded: list[str] = []
        for r in runs:
            snapshots = [truncate_at_iteration(p.editing, i) for p in r.pairs]
            if any(s is None or s.edit is None or s.test is None for s in snapshots):
                excluded.append(r.instance.instance_id)
                continue
            evaluator = evaluators[r.instance.instance_id]
            edits = [s.edit for s in snapshots]
            tests = [s.test for s in snapshots]
            flags_by_instance[r.instance.instance_id] = [
                evaluator.correctness(e) for e in edits
            ]
            grid_by_instance[r.instance.instance_id] = [
                [evaluator.cell(e, t) for t in tests] for e in edits
            ]
            cost_by_instance[r.instance.instance_id] = sum(
                _pair_cost_usd(p, i, prices) for p in r.pairs
            )
        if excluded:
            log.warning(
                "sweep at i=%d excluded %d instance(s) with missing snapshots: %s",
                i,
                len(excluded),
                ", ".join(sorted(excluded)),
            )
        if not flags_by_instance:
            raise ContractViolation(f"every instance lacked snapshots at i={i}")

        included = sorted(flags_by_instance)
        for k in ks:
            cov = coverage_at_k(
                {iid: (len(flags_by_instance[iid]), sum(flags_by_instance[iid])) for iid in included},
                k,
            )
            score = sum(
                expected_subset_majority_score(
                    grid_by_instance[iid], flags_by_instance[iid], k, seed=seed
                )
                for iid in included
            ) / len(included)
            cost = sum(
                cost_by_instance[iid] * (k / len(flags_by_instance[iid]))
                for iid in included
            )
            points.append(
                SweepPoint(
                    k_machines=k,
                    i_iterations=i,
                    coverage=cov,
                    score=score,
                    estimated_cost_usd=cost,
                )
            )
    return points


@dataclass(frozen=True)
class GapRow:
    label: str
    score: float
    recovered_gap: float | None

    def to_doc(self) -> dict[str, Any]:
        return {"label": self.label, "score": self.score, "recovered_gap": self.recovered_gap}


@dataclass(frozen=True)
class GapReport:
    """Selection quality between the random floor and the oracle ceiling."""

    rows: tuple[GapRow, ...]

    def to_doc(self) -> dict[str, Any]:
        return {"kind": "gap_report", "rows": [r.to_doc() for r in self.rows]}


def selection_gap_report(
    correctness: Mapping[str, Sequence[bool]],
    selections: Mapping[str, Mapping[str, int]],
) -> GapReport:
    """Score each selection method against random and oracle baselines.

    correctness maps instance -> per-candidate flags; selections maps
    method -> instance -> chosen index. The recovered-gap column is
    (method - random) / (oracle - random), undefined when the ceiling
    equals the floor.
    """
    if not correctness:
        raise ContractViolation("gap report requires at least one instance")
    instance_ids = sorted(correctness)
    random_score = sum(
        (sum(correctness[iid]) / len(correctness[iid])) if correctness[iid] else 0.0
        for iid in instance_ids
    ) / len(instance_ids)
    oracle_score = coverage(correctness)

    def recovered(score: float) -> float | None:
        gap = oracle_score - random_score
        if gap <= 0:
            return None
        return (score - random_score) / gap

    rows = [GapRow("random", random_score, None)]
    for method in sorted(selections):
        picks = selections[method]
        resolved = 0
        for iid in instance_ids:
            flags = correctness[iid]
            if iid not in picks:
                raise ContractViolation(f"method {method} lacks a selection for {iid}")
            index = picks[iid]
            if not flags:
                continue
            if not 0 <= index < len(flags):
                raise ContractViolation(
                    f"method {method} selected index {index} outside the "
                    f"{len(flags)} candidates of {iid}"
                )
            if flags[index]:
                resolved += 1
        score = resolved / len(instance_ids)
        rows.append(GapRow(method, score, recovered(score)))
    rows.append(GapRow("oracle", oracle_score, None))
    return GapReport(rows=tuple(rows))


def render_sweep_csv(points: Sequence[SweepPoint]) -> str:
    lines = ["k_machines,i_iterations,coverage,score,estimated_cost_usd"]
    for p in points:
        lines.append(
            f"{p.k_machines},{p.i_iterations},{p.coverage:.6f},{p.score:.6f},{p.estimated_cost_usd:.6f}"
        )
    return "\n".join(lines) + "\n"


def render_gap_text(report: GapReport) -> str:
    width = max(len(r.label) for r in report.rows)
    lines = []
    for r in report.rows:
        gap = "" if r.recovered_gap is None else f"  recovered_gap={r.recovered_gap:.3f}"
        lines.append(f"{r.label:<{width}}  {r.score:.3f}{gap}")
    return "\n".join(lines) + "\n"


def render_metric_summary(metrics: Mapping[str, float]) -> str:
    """Fig.-2 style one-line-per-metric text block, insertion ordered."""
    width = max(len(name) for name in metrics) if metrics else 0
    lines = [f"{name:<{width}}  {value:.3f}" for name, value in metrics.items()]
    return "\n".join(lines) + "\n"
