"""Analytics tests: subset estimators, truncation freezing, the serial x
parallel sweep over real sandbox runs, and the selection gap report. Expected
values are derived by hand or by independent brute force inside the tests."""

import itertools
import math
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchpool.analytics import (
    GapReport,
    InstanceRuns,
    SerialPair,
    SweepPoint,
    coverage,
    coverage_at_k,
    coverage_at_k_single,
    expected_subset_majority_score,
    render_gap_text,
    render_metric_summary,
    render_sweep_csv,
    selection_gap_report,
    sweep,
    truncate_at_iteration,
)
from patchpool.core import (
    ContractViolation,
    Edit,
    Instance,
    IterationSnapshot,
    MachineKind,
    Role,
    SearchReplaceBlock,
    TerminalStatus,
    TestScript,
    TokenUsage,
    Trajectory,
    Turn,
)
from patchpool.llm import PriceTable
from patchpool.sandbox import SandboxPolicy
from patchpool.selection import Outcome

SH = ("sh", "{script}")

# One million output tokens costs exactly 15 USD at the default price table,
# which keeps the sweep cost arithmetic checkable by hand.
TURN_USAGE = TokenUsage(
    input_tokens=0, output_tokens=1_000_000, cache_read_tokens=0, cache_write_tokens=0
)


def make_trajectory(
    kind: MachineKind,
    trajectory_id: str,
    snapshots: list[IterationSnapshot],
    status: TerminalStatus = TerminalStatus.APPROVED,
) -> Trajectory:
    turns: list[Turn] = []
    for idx in range(len(snapshots)):
        turns.append(Turn(role=Role.USER, content=f"prompt {idx}"))
        turns.append(Turn(role=Role.ASSISTANT, content=f"reply {idx}", usage=TURN_USAGE))
    return Trajectory(
        trajectory_id=trajectory_id,
        machine_kind=kind,
        turns=tuple(turns),
        iteration_snapshots=tuple(snapshots),
        terminal_status=status,
        completions_used=len(snapshots),
    )


def enumeration_coverage(n: int, c: int, k: int) -> float:
    """Reference estimator: count k-subsets containing a correct index."""
    correct = set(range(c))
    subsets = list(itertools.combinations(range(n), k))
    hits = sum(1 for s in subsets if correct & set(s))
    return hits / len(subsets)


def brute_subset_score(grid, flags, k) -> float:
    n = len(grid)
    total = 0.0
    subsets = list(itertools.combinations(range(n), k))
    for sub in subsets:
        counts = {i: sum(1 for j in sub if grid[i][j] == "pass") for i in sub}
        best = max(counts.values())
        tied = [i for i in sub if counts[i] == best]
        total += sum(1 for i in tied if flags[i]) / len(tied)
    return total / len(subsets)


class TestCoverage:
    def test_any_true_fraction(self):
        flags = {"a": [True, False], "b": [False, False], "c": []}
        assert coverage(flags) == pytest.approx(1 / 3, abs=1e-12)

    def test_all_hit(self):
        assert coverage({"a": [True], "b": [False, True]}) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            coverage({})


class TestCoverageAtK:
    def test_worked_example(self):
        # n=5 candidates, c=2 correct, k=3 drawn: 1 - C(3,3)/C(5,3) = 0.9
        assert coverage_at_k_single(5, 2, 3) == pytest.approx(0.9, abs=1e-12)

    def test_k_equals_n(self):
        assert coverage_at_k_single(4, 1, 4) == 1.0
        assert coverage_at_k_single(4, 0, 4) == 0.0

    def test_matches_enumeration_small_n(self):
        for n in range(1, 7):
            for c in range(0, n + 1):
                for k in range(1, n + 1):
                    expected = enumeration_coverage(n, c, k)
                    assert coverage_at_k_single(n, c, k) == pytest.approx(
                        expected, abs=1e-12
                    )

    def test_monotone_in_k(self):
        values = [coverage_at_k_single(8, 3, k) for k in range(1, 9)]
        assert values == sorted(values)
        assert values[-1] == 1.0

    def test_bounds_rejected(self):
        with pytest.raises(ContractViolation):
            coverage_at_k_single(5, 2, 0)
        with pytest.raises(ContractViolation):
            coverage_at_k_single(5, 2, 6)
        with pytest.raises(ContractViolation):
            coverage_at_k_single(5, 6, 3)

    def test_average_across_instances(self):
        counts = {"a": (5, 2), "b": (4, 0)}
        assert coverage_at_k(counts, 3) == pytest.approx(0.45, abs=1e-12)

    def test_instance_named_in_error(self):
        with pytest.raises(ContractViolation, match="tiny-one"):
            coverage_at_k({"big": (8, 2), "tiny-one": (2, 1)}, 4)

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            coverage_at_k({}, 1)

    @given(st.data())
    @settings(max_examples=60, deadline=None)
    def test_estimator_is_exact_probability(self, data):
        n = data.draw(st.integers(min_value=1, max_value=10))
        c = data.draw(st.integers(min_value=0, max_value=n))
        k = data.draw(st.integers(min_value=1, max_value=n))
        value = coverage_at_k_single(n, c, k)
        assert 0.0 <= value <= 1.0
        assert value == pytest.approx(enumeration_coverage(n, c, k), abs=1e-12)


class TestTruncateAtIteration:
    def make(self, count: int) -> Trajectory:
        snapshots = [
            IterationSnapshot(test=TestScript(script_text=f"exit {i}\n"), edit=None)
            for i in range(count)
        ]
        return make_trajectory(MachineKind.TESTING, "t", snapshots)

    def test_freezes_after_approval(self):
        traj = self.make(3)
        late = truncate_at_iteration(traj, 8)
        assert late is traj.iteration_snapshots[2]

    def test_mid_run_state(self):
        traj = self.make(3)
        assert truncate_at_iteration(traj, 2) is traj.iteration_snapshots[1]
        assert truncate_at_iteration(traj, 1) is traj.iteration_snapshots[0]

    def test_one_based(self):
        with pytest.raises(ContractViolation):
            truncate_at_iteration(self.make(2), 0)

    def test_no_snapshots_yields_none(self):
        empty = Trajectory(
            trajectory_id="t",
            machine_kind=MachineKind.TESTING,
            turns=(),
            iteration_snapshots=(),
            terminal_status=TerminalStatus.BACKEND_FAILURE,
            completions_used=0,
            failure_reason="interrupted",
        )
        assert truncate_at_iteration(empty, 1) is None


class TestExpectedSubsetMajority:
    def test_matches_brute_force(self):
        grid = [
            ["pass", "pass", "fail"],
            ["fail", "pass", "fail"],
            ["error", "pass", "fail"],
        ]
        flags = [True, False, False]
        for k in (1, 2, 3):
            assert expected_subset_majority_score(grid, flags, k) == pytest.approx(
                brute_subset_score(grid, flags, k), abs=1e-12
            )

    def test_accepts_outcome_enum_cells(self):
        grid = [[Outcome.PASS, Outcome.FAIL], [Outcome.FAIL, Outcome.PASS]]
        assert expected_subset_majority_score(grid, [True, False], 2) == pytest.approx(
            0.5, abs=1e-12
        )

    def test_tie_splits_uniformly(self):
        grid = [["pass", "pass"], ["pass", "pass"]]
        assert expected_subset_majority_score(grid, [True, False], 2) == pytest.approx(
            0.5, abs=1e-12
        )

    def test_singleton_subsets_are_mean_correctness(self):
        grid = [["fail"] * 4 for _ in range(4)]
        flags = [True, False, True, False]
        assert expected_subset_majority_score(grid, flags, 1) == pytest.approx(
            0.5, abs=1e-12
        )

    def test_sampling_path_is_seeded(self):
        # 13 rows exceeds the enumeration limit; only row 0 ever passes.
        n = 13
        grid = [["pass" if i == 0 else "fail"] * n for i in range(n)]
        flags = [i == 0 for i in range(n)]
        a = expected_subset_majority_score(grid, flags, 3, seed=7)
        b = expected_subset_majority_score(grid, flags, 3, seed=7)
        assert a == b
        exact = expected_subset_majority_score(grid, flags, 3, enumeration_limit=13)
        assert exact == pytest.approx(3 / 13, abs=1e-12)
        assert abs(a - exact) < 0.1

    def test_validation(self):
        with pytest.raises(ContractViolation):
            expected_subset_majority_score([], [], 1)
        with pytest.raises(ContractViolation):
            expected_subset_majority_score([["pass", "pass"]], [True], 1)
        with pytest.raises(ContractViolation):
            expected_subset_majority_score([["pass"]], [True, False], 1)
        with pytest.raises(ContractViolation):
            expected_subset_majority_score([["pass"]], [True], 2)

    @given(st.data())
    @settings(max_examples=40, deadline=None)
    def test_matches_brute_force_random_grids(self, data):
        n = data.draw(st.integers(min_value=1, max_value=5))
        cells = st.sampled_from(["pass", "fail", "error", "timeout"])
        grid = [
            data.draw(st.lists(cells, min_size=n, max_size=n)) for _ in range(n)
        ]
        flags = data.draw(st.lists(st.booleans(), min_size=n, max_size=n))
        k = data.draw(st.integers(min_value=1, max_value=n))
        assert expected_subset_majority_score(grid, flags, k) == pytest.approx(
            brute_subset_score(grid, flags, k), abs=1e-12
        )


# Sandbox-backed sweep fixtures. The repo has one bug; three machine pairs
# produce edits of varying quality and tests of varying discrimination.

GOOD_TEST = TestScript(
    script_text=(
        'grep -q "hello, world" app.py && exit 0\n'
        'grep -q "hello" app.py && exit 2\n'
        "exit 1\n"
    ),
    interpreter_cmd=SH,
)
TRIVIAL_TEST = TestScript(script_text="exit 0\n", interpreter_cmd=SH)
HARSH_TEST = TestScript(script_text="exit 2\n", interpreter_cmd=SH)

FIX_EDIT = Edit(
    blocks=(
        SearchReplaceBlock(
            file_path="app.py",
            search_text='    return "hello"',
            replace_text='    return "hello, world"',
        ),
    )
)
NOOP_EDIT = Edit(
    blocks=(
        SearchReplaceBlock(
            file_path="README.md", search_text="demo", replace_text="demo!"
        ),
    )
)
BAD_EDIT = Edit(
    blocks=(
        SearchReplaceBlock(
            file_path="app.py",
            search_text='    return "hello"',
            replace_text='    return "goodbye"',
        ),
    )
)


@pytest.fixture()
def sweep_instance(tmp_path: Path) -> Instance:
    root = tmp_path / "snapshot"
    root.mkdir()
    (root / "app.py").write_text('def greet():\n    return "hello"\n', encoding="utf-8")
    (root / "README.md").write_text("demo\n", encoding="utf-8")
    return Instance(
        instance_id="demo-0001",
        issue_text="greet() should return 'hello, world'.",
        codebase_ref=root,
        oracle_eval=("sh", "-c", 'grep -q "hello, world" app.py'),
    )


def sweep_policy(tmp_path: Path) -> SandboxPolicy:
    return SandboxPolicy(interpreter_cmd=SH, workspace_base=tmp_path / "ws")


def editing_pair(pair_id: int, snapshots: list[IterationSnapshot]) -> SerialPair:
    testing = make_trajectory(
        MachineKind.TESTING,
        f"testing-{pair_id:02d}",
        [IterationSnapshot(test=s.test) for s in snapshots],
    )
    editing = make_trajectory(MachineKind.EDITING, f"editing-{pair_id:02d}", snapshots)
    return SerialPair(testing=testing, editing=editing)


@pytest.fixture()
def sweep_runs(sweep_instance: Instance) -> list[InstanceRuns]:
    pairs = (
        editing_pair(
            0,
            [
                IterationSnapshot(test=GOOD_TEST, edit=NOOP_EDIT),
                IterationSnapshot(test=GOOD_TEST, edit=FIX_EDIT),
            ],
        ),
        editing_pair(1, [IterationSnapshot(test=TRIVIAL_TEST, edit=NOOP_EDIT)]),
        editing_pair(2, [IterationSnapshot(test=HARSH_TEST, edit=BAD_EDIT)]),
    )
    return [InstanceRuns(instance=sweep_instance, pairs=pairs)]


class TestSweep:
    def test_points_match_hand_derivation(self, sweep_runs, tmp_path):
        points = sweep(
            sweep_runs,
            ks=[1, 2, 3],
            iterations=[1, 2],
            policy=sweep_policy(tmp_path),
            prices=PriceTable(),
        )
        by_axis = {(p.k_machines, p.i_iterations): p for p in points}
        assert len(points) == 6
        assert list(by_axis) == [(1, 1), (2, 1), (3, 1), (1, 2), (2, 2), (3, 2)]

        # At i=1 no pair has found the fix yet.
        for k in (1, 2, 3):
            p = by_axis[(k, 1)]
            assert p.coverage == 0.0
            assert p.score == 0.0
            # Each pair spent one completion on each machine: 30 USD a pair.
            assert p.estimated_cost_usd == pytest.approx(90.0 * k / 3, abs=1e-9)

        # At i=2 pair 0 has the fix; pairs 1 and 2 are frozen at their
        # single completion. Edits [fix, noop, bad] vs tests
        # [good, trivial, harsh] give pass counts [2, 1, 1].
        assert by_axis[(1, 2)].coverage == pytest.approx(1 / 3, abs=1e-12)
        assert by_axis[(2, 2)].coverage == pytest.approx(2 / 3, abs=1e-12)
        assert by_axis[(3, 2)].coverage == pytest.approx(1.0, abs=1e-12)
        assert by_axis[(1, 2)].score == pytest.approx(1 / 3, abs=1e-12)
        assert by_axis[(2, 2)].score == pytest.approx(2 / 3, abs=1e-12)
        assert by_axis[(3, 2)].score == pytest.approx(1.0, abs=1e-12)
        # Pair 0 now has two completions a machine; the others stay at one.
        assert by_axis[(3, 2)].estimated_cost_usd == pytest.approx(120.0, abs=1e-9)
        assert by_axis[(1, 2)].estimated_cost_usd == pytest.approx(40.0, abs=1e-9)

    def test_full_subset_late_iteration_equals_plain_coverage(
        self, sweep_runs, tmp_path
    ):
        points = sweep(
            sweep_runs, ks=[3], iterations=[9], policy=sweep_policy(tmp_path)
        )
        assert len(points) == 1
        assert points[0].coverage == pytest.approx(1.0, abs=1e-12)
        assert points[0].score == pytest.approx(1.0, abs=1e-12)

    def test_instances_without_snapshots_are_excluded(
        self, sweep_runs, tmp_path, caplog
    ):
        interrupted = Trajectory(
            trajectory_id="editing-00",
            machine_kind=MachineKind.EDITING,
            turns=(),
            iteration_snapshots=(),
            terminal_status=TerminalStatus.BACKEND_FAILURE,
            completions_used=0,
            failure_reason="interrupted",
        )
        ghost_root = tmp_path / "ghost"
        ghost_root.mkdir()
        (ghost_root / "app.py").write_text("pass\n", encoding="utf-8")
        ghost = InstanceRuns(
            instance=Instance(
                instance_id="ghost-0002",
                issue_text="never ran",
                codebase_ref=ghost_root,
                oracle_eval=("sh", "-c", "exit 1"),
            ),
            pairs=tuple(
                SerialPair(testing=interrupted, editing=interrupted) for _ in range(3)
            ),
        )
        with caplog.at_level("WARNING"):
            points = sweep(
                sweep_runs + [ghost],
                ks=[3],
                iterations=[2],
                policy=sweep_policy(tmp_path),
            )
        assert "ghost-0002" in caplog.text
        baseline = sweep(
            sweep_runs, ks=[3], iterations=[2], policy=sweep_policy(tmp_path)
        )
        assert [p.to_doc() for p in points] == [p.to_doc() for p in baseline]

    def test_all_excluded_rejected(self, sweep_instance, tmp_path):
        interrupted = Trajectory(
            trajectory_id="editing-00",
            machine_kind=MachineKind.EDITING,
            turns=(),
            iteration_snapshots=(),
            terminal_status=TerminalStatus.BACKEND_FAILURE,
            completions_used=0,
        )
        runs = [
            InstanceRuns(
                instance=sweep_instance,
                pairs=(SerialPair(testing=interrupted, editing=interrupted),),
            )
        ]
        with pytest.raises(ContractViolation):
            sweep(runs, ks=[1], iterations=[1], policy=sweep_policy(tmp_path))

    def test_k_beyond_pool_rejected(self, sweep_runs, tmp_path):
        with pytest.raises(ContractViolation):
            sweep(sweep_runs, ks=[4], iterations=[1], policy=sweep_policy(tmp_path))

    def test_empty_runs_rejected(self, tmp_path):
        with pytest.raises(ContractViolation):
            sweep([], ks=[1], iterations=[1], policy=sweep_policy(tmp_path))


class TestGapReport:
    def correctness(self):
        return {
            "a": [True, False],
            "b": [False, False],
            "c": [True, True],
        }

    def test_rows_and_recovered_gap(self):
        selections = {
            "majority": {"a": 0, "b": 0, "c": 1},
            "model": {"a": 1, "b": 1, "c": 0},
        }
        report = selection_gap_report(self.correctness(), selections)
        labels = [r.label for r in report.rows]
        assert labels == ["random", "majority", "model", "oracle"]
        by_label = {r.label: r for r in report.rows}
        # random = mean(1/2, 0, 1); oracle = any-true fraction.
        assert by_label["random"].score == pytest.approx(0.5, abs=1e-12)
        assert by_label["oracle"].score == pytest.approx(2 / 3, abs=1e-12)
        assert by_label["majority"].score == pytest.approx(2 / 3, abs=1e-12)
        assert by_label["majority"].recovered_gap == pytest.approx(1.0, abs=1e-12)
        assert by_label["model"].score == pytest.approx(1 / 3, abs=1e-12)
        assert by_label["model"].recovered_gap == pytest.approx(-1.0, abs=1e-12)
        assert by_label["random"].recovered_gap is None
        assert by_label["oracle"].recovered_gap is None

    def test_random_never_exceeds_oracle(self):
        report = selection_gap_report(self.correctness(), {})
        by_label = {r.label: r for r in report.rows}
        assert by_label["random"].score <= by_label["oracle"].score

    def test_zero_gap_yields_none(self):
        report = selection_gap_report({"a": [True]}, {"m": {"a": 0}})
        by_label = {r.label: r for r in report.rows}
        assert by_label["m"].score == 1.0
        assert by_label["m"].recovered_gap is None

    def test_empty_candidate_list_scores_zero(self):
        report = selection_gap_report(
            {"a": [], "b": [True]}, {"m": {"a": 5, "b": 0}}
        )
        by_label = {r.label: r for r in report.rows}
        assert by_label["oracle"].score == pytest.approx(0.5, abs=1e-12)
        assert by_label["m"].score == pytest.approx(0.5, abs=1e-12)

    def test_missing_selection_rejected(self):
        with pytest.raises(ContractViolation):
            selection_gap_report(self.correctness(), {"m": {"a": 0}})

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractViolation):
            selection_gap_report(
                self.correctness(), {"m": {"a": 9, "b": 0, "c": 0}}
            )

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            selection_gap_report({}, {})


class TestRenderers:
    def test_sweep_csv(self):
        points = [
            SweepPoint(
                k_machines=1,
                i_iterations=2,
                coverage=0.5,
                score=0.25,
                estimated_cost_usd=12.5,
            )
        ]
        text = render_sweep_csv(points)
        lines = text.splitlines()
        assert lines[0] == "k_machines,i_iterations,coverage,score,estimated_cost_usd"
        assert lines[1] == "1,2,0.500000,0.250000,12.500000"
        assert text.endswith("\n")

    def test_gap_text(self):
        report = selection_gap_report(
            {"a": [True, False]}, {"majority": {"a": 0}}
        )
        text = render_gap_text(report)
        assert "random" in text and "oracle" in text and "majority" in text
        assert "recovered_gap=1.000" in text

    def test_metric_summary(self):
        text = render_metric_summary({"coverage": 0.75, "score": 0.5})
        assert text == "coverage  0.750\nscore     0.500\n"

    def test_gap_report_round_trip_doc(self):
        report = selection_gap_report({"a": [True]}, {"m": {"a": 0}})
        doc = report.to_doc()
        assert doc["kind"] == "gap_report"
        assert [row["label"] for row in doc["rows"]] == ["random", "m", "oracle"]
