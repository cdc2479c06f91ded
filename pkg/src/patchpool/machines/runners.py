"""The three concrete machines: testing, editing, selection.

Each wraps the generic engine with its own prompts, artifacts, and sandbox
feedback step. Feedback text never embeds workspace paths or wall-clock
values, so trajectories are byte-reproducible across runs and hosts.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Any, Callable

from patchpool.context import RankedContext, render_included_files
from patchpool.core import (
    EXIT_FIXED,
    EXIT_ISSUE_PRESENT,
    CandidateSample,
    ContractViolation,
    Edit,
    ExecutionResult,
    Instance,
    IterationSnapshot,
    MachineKind,
    TerminalStatus,
    TestScript,
    Trajectory,
    candidate_tie_break_key,
)
from patchpool.llm import Backend, RetryPolicy
from patchpool.machines.actions import Action, ActionKind
from patchpool.machines.engine import (
    EDITING_DEFAULTS,
    MachineConfig,
    MachineDefinition,
    SELECTION_DEFAULTS,
    TESTING_DEFAULTS,
    TrajectoryJournal,
    run_machine,
)
from patchpool.prompts import render
from patchpool.sandbox import (
    ApplyError,
    SandboxPolicy,
    apply_edit,
    edit_target_paths,
    materialize,
    run_script,
)

WORKSPACE_PLACEHOLDER = "<workspace>"


def render_execution_result(result: ExecutionResult, workspace_roots: tuple[str, ...] = ()) -> str:
    """Render an execution outcome for feedback prompts.

    Wall time is deliberately omitted and workspace paths are replaced with
    a stable placeholder: rendered trajectories must not depend on host
    timing or temp-directory names.
    """
    if result.timed_out:
        header = "exit code: none (timed out)"
    else:
        header = f"exit code: {result.exit_code}"
    body = "\n".join(
        [
            header,
            "stdout:",
            result.stdout if result.stdout else "(empty)",
            "stderr:",
            result.stderr if result.stderr else "(empty)",
        ]
    )
    for root in workspace_roots:
        if root:
            body = body.replace(root, WORKSPACE_PLACEHOLDER)
    return body


class _TestingMachine(MachineDefinition):
    kind = MachineKind.TESTING

    def __init__(
        self,
        instance: Instance,
        policy: SandboxPolicy,
        trajectory_id: str,
        timeout_s: float,
    ) -> None:
        self.instance = instance
        self.policy = policy
        self.trajectory_id = trajectory_id
        self.timeout_s = timeout_s
        self.current_test: TestScript | None = None
        self.last_exit: int | None = None
        self.last_timed_out = False

    def system_prompt(self) -> str:
        return render("testing_system")

    def initial_user_prompt(self) -> str:
        return render("testing_initial", issue=self.instance.issue_text)

    def validate_action(self, action: Action) -> str | None:
        if action.kind == ActionKind.APPROVE and self.current_test is None:
            return "nothing to approve: no test script has been written yet"
        return None

    def apply_action(self, action: Action) -> None:
        self.current_test = TestScript(
            script_text=action.script_text or "",
            interpreter_cmd=self.policy.interpreter_cmd,
        )

    def feedback(self) -> tuple[str, dict[str, Any] | None]:
        assert self.current_test is not None
        with materialize(self.instance, self.policy) as ws:
            result = run_script(ws, self.current_test, self.policy, timeout_s=self.timeout_s)
            rendered = render_execution_result(result, (str(ws.root),))
        self.last_exit = result.exit_code
        self.last_timed_out = result.timed_out
        text = render("testing_feedback", result_block=rendered)
        extra = {"exit_code": result.exit_code, "timed_out": result.timed_out}
        return text, extra

    def current_snapshot(self) -> IterationSnapshot:
        return IterationSnapshot(test=self.current_test)

    def on_terminal_action(self, action: Action) -> tuple[IterationSnapshot, list[str]]:
        notes: list[str] = []
        if self.last_exit != EXIT_ISSUE_PRESENT:
            notes.append(
                "approved while the latest run did not exit "
                f"{EXIT_ISSUE_PRESENT} on the unedited codebase"
            )
        return IterationSnapshot(test=self.current_test), notes

    def restore_iteration(self, snapshot: IterationSnapshot, extra: dict[str, Any] | None) -> None:
        if snapshot.test is not None:
            self.current_test = snapshot.test
        if extra is not None:
            self.last_exit = extra.get("exit_code")
            self.last_timed_out = bool(extra.get("timed_out"))


class _EditingMachine(MachineDefinition):
    kind = MachineKind.EDITING

    def __init__(
        self,
        instance: Instance,
        context_text: str,
        seed_test: TestScript,
        policy: SandboxPolicy,
        trajectory_id: str,
        timeout_s: float,
    ) -> None:
        self.instance = instance
        self.context_text = context_text
        self.policy = policy
        self.trajectory_id = trajectory_id
        self.timeout_s = timeout_s
        self.current_test = seed_test
        self.current_edit = Edit()
        self.last_pre_exit: int | None = None
        self.last_post_exit: int | None = None
        self.last_apply_error: str | None = None

    def system_prompt(self) -> str:
        return render("editing_system")

    def initial_user_prompt(self) -> str:
        with materialize(self.instance, self.policy) as ws:
            pre = run_script(ws, self.current_test, self.policy, timeout_s=self.timeout_s)
            pre_text = render_execution_result(pre, (str(ws.root),))
        self.last_pre_exit = pre.exit_code
        return render(
            "editing_initial",
            issue=self.instance.issue_text,
            context_block=self.context_text,
            test_script=self.current_test.script_text,
            pre_edit_result=pre_text,
        )

    def validate_action(self, action: Action) -> str | None:
        if action.kind == ActionKind.APPROVE and self.current_edit.is_empty:
            return "nothing to approve: no edit has been written yet"
        return None

    def apply_action(self, action: Action) -> None:
        if action.kind == ActionKind.WRITE_EDIT:
            self.current_edit = Edit.from_blocks(action.blocks)
        else:
            self.current_test = TestScript(
                script_text=action.script_text or "",
                interpreter_cmd=self.policy.interpreter_cmd,
            )

    def feedback(self) -> tuple[str, dict[str, Any] | None]:
        with materialize(self.instance, self.policy) as ws_pre:
            pre = run_script(ws_pre, self.current_test, self.policy, timeout_s=self.timeout_s)
            pre_text = render_execution_result(pre, (str(ws_pre.root),))
        self.last_pre_exit = pre.exit_code

        apply_error: str | None = None
        post: ExecutionResult | None = None
        post_text = ""
        with materialize(self.instance, self.policy) as ws_post:
            try:
                apply_edit(ws_post, self.current_edit)
            except ApplyError as exc:
                apply_error = str(exc).replace(str(ws_post.root), WORKSPACE_PLACEHOLDER)
            else:
                post = run_script(ws_post, self.current_test, self.policy, timeout_s=self.timeout_s)
                post_text = render_execution_result(post, (str(ws_post.root),))
        self.last_apply_error = apply_error
        self.last_post_exit = post.exit_code if post is not None else None

        if apply_error is not None:
            block = "\n".join(
                [
                    "the edit failed to apply:",
                    apply_error,
                    "",
                    "test on the unedited codebase:",
                    pre_text,
                ]
            )
        else:
            block = "\n".join(
                [
                    "test on the unedited codebase:",
                    pre_text,
                    "",
                    "test on the edited codebase:",
                    post_text,
                ]
            )
        extra = {
            "pre_exit": pre.exit_code,
            "post_exit": post.exit_code if post is not None else None,
            "apply_error": apply_error,
        }
        return render("editing_feedback", feedback_block=block), extra

    def current_snapshot(self) -> IterationSnapshot:
        return IterationSnapshot(test=self.current_test, edit=self.current_edit)

    def on_terminal_action(self, action: Action) -> tuple[IterationSnapshot, list[str]]:
        notes: list[str] = []
        two_sided = (
            self.last_apply_error is None
            and self.last_pre_exit == EXIT_ISSUE_PRESENT
            and self.last_post_exit == EXIT_FIXED
        )
        if not two_sided:
            notes.append(
                "approved without a two-sided run (pre-edit exit "
                f"{self.last_pre_exit}, post-edit exit {self.last_post_exit})"
            )
        return IterationSnapshot(test=self.current_test, edit=self.current_edit), notes

    def restore_iteration(self, snapshot: IterationSnapshot, extra: dict[str, Any] | None) -> None:
        if snapshot.test is not None:
            self.current_test = snapshot.test
        if snapshot.edit is not None:
            self.current_edit = snapshot.edit
        if extra is not None:
            self.last_pre_exit = extra.get("pre_exit")
            self.last_post_exit = extra.get("post_exit")
            self.last_apply_error = extra.get("apply_error")


def ensure_candidate_diffs(
    instance: Instance, candidates: tuple[CandidateSample, ...], policy: SandboxPolicy
) -> None:
    """Render and cache the unified diff of any candidate that lacks one.

    Prompts and tie-breaks read edit.unified_diff; rendering it once up
    front, by applying to a scratch workspace, keeps both independent of
    whether an edit happened to be applied earlier in the process.
    """
    for candidate in candidates:
        edit = candidate.edit
        if edit.is_empty or edit.unified_diff:
            continue
        with materialize(instance, policy) as ws:
            try:
                apply_edit(ws, edit)
            except ApplyError:
                pass


class _SelectionMachine(MachineDefinition):
    kind = MachineKind.SELECTION

    def __init__(
        self,
        instance: Instance,
        candidates: tuple[CandidateSample, ...],
        example_test: TestScript,
        policy: SandboxPolicy,
        trajectory_id: str,
        timeout_s: float,
    ) -> None:
        self.instance = instance
        self.candidates = candidates
        self.example_test = example_test
        self.policy = policy
        self.trajectory_id = trajectory_id
        self.timeout_s = timeout_s
        self.current_test: TestScript | None = None
        self.pass_counts = [0] * len(candidates)

    def system_prompt(self) -> str:
        return render("selection_system")

    def initial_user_prompt(self) -> str:
        candidate_block = "\n\n".join(
            "candidate {i}:\n{diff}".format(
                i=i,
                diff=c.edit.unified_diff.rstrip() or "(edit could not be rendered as a diff)",
            )
            for i, c in enumerate(self.candidates)
        )
        touched: list[str] = []
        for c in self.candidates:
            for path in edit_target_paths(c.edit):
                if path not in touched:
                    touched.append(path)
        file_parts: list[str] = []
        root = self.instance.codebase_ref
        for path in sorted(touched):
            target = root / path
            try:
                content = target.read_text(encoding="utf-8")
            except (OSError, UnicodeDecodeError):
                continue
            file_parts.append(f'<file path="{path}">\n{content}\n</file>')
        return render(
            "selection_initial",
            issue=self.instance.issue_text,
            max_index=len(self.candidates) - 1,
            candidate_block=candidate_block,
            file_block="\n".join(file_parts),
            example_test=self.example_test.script_text,
        )

    def validate_action(self, action: Action) -> str | None:
        if action.kind == ActionKind.SELECT:
            index = action.selection
            if index is None or not 0 <= index < len(self.candidates):
                return (
                    f"select index {index} is out of range "
                    f"(valid indices: 0..{len(self.candidates) - 1})"
                )
        return None

    def apply_action(self, action: Action) -> None:
        self.current_test = TestScript(
            script_text=action.script_text or "",
            interpreter_cmd=self.policy.interpreter_cmd,
        )

    def feedback(self) -> tuple[str, dict[str, Any] | None]:
        assert self.current_test is not None
        parts: list[str] = []
        with materialize(self.instance, self.policy) as ws:
            base = run_script(ws, self.current_test, self.policy, timeout_s=self.timeout_s)
            parts.append(
                "unedited codebase:\n" + render_execution_result(base, (str(ws.root),))
            )
        outcomes: list[str] = []
        for i, candidate in enumerate(self.candidates):
            with materialize(self.instance, self.policy) as ws:
                try:
                    apply_edit(ws, candidate.edit)
                except ApplyError as exc:
                    message = str(exc).replace(str(ws.root), WORKSPACE_PLACEHOLDER)
                    parts.append(f"candidate {i}: edit failed to apply:\n{message}")
                    outcomes.append("apply_error")
                    continue
                result = run_script(ws, self.current_test, self.policy, timeout_s=self.timeout_s)
                parts.append(
                    f"candidate {i}:\n" + render_execution_result(result, (str(ws.root),))
                )
                if result.exit_code == EXIT_FIXED and not result.timed_out:
                    self.pass_counts[i] += 1
                    outcomes.append("pass")
                else:
                    outcomes.append("timeout" if result.timed_out else "fail")
        text = render("selection_feedback", result_block="\n\n".join(parts))
        return text, {"outcomes": outcomes}

    def current_snapshot(self) -> IterationSnapshot:
        return IterationSnapshot(test=self.current_test)

    def on_terminal_action(self, action: Action) -> tuple[IterationSnapshot, list[str]]:
        return IterationSnapshot(test=self.current_test, selection=action.selection), []

    def restore_iteration(self, snapshot: IterationSnapshot, extra: dict[str, Any] | None) -> None:
        if snapshot.test is not None:
            self.current_test = snapshot.test
        if extra is not None:
            for i, outcome in enumerate(extra.get("outcomes", ())):
                if outcome == "pass" and i < len(self.pass_counts):
                    self.pass_counts[i] += 1

    def fallback_index(self) -> int:
        ranked = sorted(
            range(len(self.candidates)),
            key=lambda i: (-self.pass_counts[i],) + candidate_tie_break_key(self.candidates[i]),
        )
        return ranked[0]


def run_testing_machine(
    instance: Instance,
    backend: Backend,
    policy: SandboxPolicy | None = None,
    config: MachineConfig = TESTING_DEFAULTS,
    trajectory_id: str = "testing-00",
    journal: TrajectoryJournal | None = None,
    retry: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> Trajectory:
    """Iterate on a reproduction test against the unedited codebase.

    The prompt deliberately carries no codebase context; the issue text and
    execution feedback are the machine's only inputs.
    """
    policy = policy or SandboxPolicy()
    definition = _TestingMachine(instance, policy, trajectory_id, config.timeout_s)
    return run_machine(definition, backend, config, journal=journal, retry=retry, sleep=sleep)


def run_editing_machine(
    instance: Instance,
    context: RankedContext | str,
    seed: Trajectory,
    backend: Backend,
    policy: SandboxPolicy | None = None,
    config: MachineConfig = EDITING_DEFAULTS,
    trajectory_id: str = "editing-00",
    journal: TrajectoryJournal | None = None,
    retry: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> Trajectory:
    """Iterate on an edit seeded with a testing machine's approved test.

    The testing chat history is not carried over; the new conversation gets
    the issue, the included context files, the seed test, and its pre-edit
    output.
    """
    policy = policy or SandboxPolicy()
    final = seed.final_snapshot
    if final is None or final.test is None:
        raise ContractViolation(f"seed trajectory {seed.trajectory_id} holds no final test")
    context_text = (
        context if isinstance(context, str) else render_included_files(instance, context)
    )
    definition = _EditingMachine(
        instance, context_text, final.test, policy, trajectory_id, config.timeout_s
    )
    return run_machine(definition, backend, config, journal=journal, retry=retry, sleep=sleep)


@dataclass(frozen=True)
class SelectionOutcome:
    """Selection machine verdict: chosen candidate plus how it was chosen."""

    selected_index: int
    trajectory: Trajectory
    fallback_used: bool

    def to_doc(self) -> dict[str, Any]:
        return {
            "kind": "selection_outcome",
            "selected_index": self.selected_index,
            "trajectory": self.trajectory.to_doc(),
            "fallback_used": self.fallback_used,
        }


def run_selection_machine(
    instance: Instance,
    candidates: tuple[CandidateSample, ...],
    example_test: TestScript,
    backend: Backend,
    policy: SandboxPolicy | None = None,
    config: MachineConfig = SELECTION_DEFAULTS,
    trajectory_id: str = "selection-00",
    journal: TrajectoryJournal | None = None,
    retry: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> SelectionOutcome:
    """Choose among candidate edits by writing discriminating tests.

    On exhaustion without an explicit selection the candidate passing the
    most selection-machine tests wins; ties break by shorter diff then
    lexicographic candidate id.
    """
    if not candidates:
        raise ContractViolation("selection requires at least one candidate")
    policy = policy or SandboxPolicy()
    ensure_candidate_diffs(instance, candidates, policy)
    definition = _SelectionMachine(
        instance, candidates, example_test, policy, trajectory_id, config.timeout_s
    )
    trajectory = run_machine(definition, backend, config, journal=journal, retry=retry, sleep=sleep)
    final = trajectory.final_snapshot
    if trajectory.terminal_status == TerminalStatus.APPROVED and final and final.selection is not None:
        return SelectionOutcome(final.selection, trajectory, fallback_used=False)
    return SelectionOutcome(definition.fallback_index(), trajectory, fallback_used=True)
