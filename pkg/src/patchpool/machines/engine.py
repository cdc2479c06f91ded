"""Generic feedback-loop engine shared by the three machines.

The loop is: send the conversation, parse the reply into an action, execute
the machine-specific feedback step, snapshot the working artifacts, repeat
until the model approves/selects or the completion budget runs out. One
malformed reply earns one correction prompt; the malformed completion still
counts against the budget.

Every completed iteration is appended to a JSONL journal before the next
request is sent, so an interrupted run resumes at the last completed turn
and, with a replayable backend, reproduces the uninterrupted run byte for
byte.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from patchpool.core import (
    ContractViolation,
    IterationSnapshot,
    MachineKind,
    Role,
    TerminalStatus,
    Trajectory,
    Turn,
)
from patchpool.llm import Backend, BackendError, ChatMessage, ChatRequest, RetryPolicy, complete
from patchpool.machines.actions import (
    ALLOWED_ACTIONS,
    Action,
    ActionKind,
    MalformedResponse,
    parse_action,
)
from patchpool.prompts import render


@dataclass(frozen=True)
class MachineConfig:
    max_completions: int = 8
    temperature: float = 0.5
    timeout_s: float = 100.0
    max_output_tokens: int = 8192

    def __post_init__(self) -> None:
        if self.max_completions < 1:
            raise ContractViolation(f"max_completions must be >= 1, got {self.max_completions}")


TESTING_DEFAULTS = MachineConfig(max_completions=8, temperature=0.5)
EDITING_DEFAULTS = MachineConfig(max_completions=8, temperature=0.5)
SELECTION_DEFAULTS = MachineConfig(max_completions=10, temperature=0.0)


class MachineDefinition:
    """Machine-specific behavior plugged into run_machine.

    Subclasses hold the working artifacts (current test, current edit,
    accumulated votes) and the sandbox plumbing. The engine owns the
    conversation, budget, journal, and terminal-status bookkeeping.
    """

    kind: MachineKind
    trajectory_id: str

    def system_prompt(self) -> str:
        raise NotImplementedError

    def initial_user_prompt(self) -> str:
        raise NotImplementedError

    def validate_action(self, action: Action) -> str | None:
        """Reason the action is unusable in the current state, or None."""
        return None

    def apply_action(self, action: Action) -> None:
        """Record a write_test / write_edit artifact."""
        raise NotImplementedError

    def feedback(self) -> tuple[str, dict[str, Any] | None]:
        """Execute the feedback step; return (feedback text, journal extra)."""
        raise NotImplementedError

    def current_snapshot(self) -> IterationSnapshot:
        raise NotImplementedError

    def on_terminal_action(self, action: Action) -> tuple[IterationSnapshot, list[str]]:
        """Handle approve/select; return (final snapshot, annotations)."""
        raise NotImplementedError

    def restore_iteration(self, snapshot: IterationSnapshot, extra: dict[str, Any] | None) -> None:
        """Rebuild working state from one journaled iteration during resume."""
        raise NotImplementedError


class TrajectoryJournal:
    """Append-only JSONL record of machine iterations.

    Line 1 is a header; each further line is one iteration event or the
    terminal marker. A torn final line (crash mid-write) is discarded on
    load; everything before it is trusted.
    """

    def __init__(self, path: Path) -> None:
        self.path = Path(path)

    def exists(self) -> bool:
        return self.path.exists()

    def write_header(self, trajectory_id: str, machine_kind: MachineKind) -> None:
        self._append(
            {
                "kind": "trajectory_journal",
                "schema_version": 1,
                "trajectory_id": trajectory_id,
                "machine_kind": machine_kind.value,
            }
        )

    def append_iteration(self, event: dict[str, Any]) -> None:
        self._append({"event": "iteration", **event})

    def append_terminal(
        self,
        status: TerminalStatus,
        failure_reason: str | None,
        annotations: list[str],
        selected_index: int | None = None,
    ) -> None:
        self._append(
            {
                "event": "terminal",
                "terminal_status": status.value,
                "failure_reason": failure_reason,
                "annotations": annotations,
                "selected_index": selected_index,
            }
        )

    def _append(self, doc: dict[str, Any]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        line = json.dumps(doc, sort_keys=True, ensure_ascii=False)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def load(
        self, repair: bool = False
    ) -> tuple[dict[str, Any] | None, list[dict[str, Any]], dict[str, Any] | None]:
        """Return (header, iteration events, terminal event or None).

        Only newline-terminated lines count; an unterminated or unparseable
        tail is torn. With ``repair`` the file is truncated to the trusted
        prefix so later appends leave no garbage mid-file.
        """
        header: dict[str, Any] | None = None
        iterations: list[dict[str, Any]] = []
        terminal: dict[str, Any] | None = None
        try:
            raw = self.path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None, [], None
        parts = raw.split("\n")
        valid_bytes = 0
        for line in parts[:-1]:
            if line.strip():
                try:
                    doc = json.loads(line)
                except json.JSONDecodeError:
                    break
                if doc.get("kind") == "trajectory_journal":
                    header = doc
                elif doc.get("event") == "iteration":
                    iterations.append(doc)
                elif doc.get("event") == "terminal":
                    terminal = doc
            valid_bytes += len((line + "\n").encode("utf-8"))
        if repair and valid_bytes < len(raw.encode("utf-8")):
            with open(self.path, "r+b") as fh:
                fh.truncate(valid_bytes)
        return header, iterations, terminal

    def unlink(self) -> None:
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


def _request_from_turns(turns: list[Turn], config: MachineConfig) -> ChatRequest:
    messages = tuple(ChatMessage(role=t.role.value, content=t.content) for t in turns)
    # The stable prefix (system + initial user prompt) is marked cacheable.
    marker = min(2, len(messages))
    return ChatRequest(
        messages=messages,
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
        cache_prefix_marker=marker,
    )


def run_machine(
    definition: MachineDefinition,
    backend: Backend,
    config: MachineConfig,
    journal: TrajectoryJournal | None = None,
    retry: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> Trajectory:
    """Drive one machine to a terminal status and return its trajectory.

    Backend failures propagate after the journal has captured all completed
    iterations; rerunning with the same arguments resumes from the journal.
    """
    turns: list[Turn] = [
        Turn(role=Role.SYSTEM, content=definition.system_prompt()),
        Turn(role=Role.USER, content=definition.initial_user_prompt()),
    ]
    snapshots: list[IterationSnapshot] = []
    annotations: list[str] = []
    completions_used = 0
    any_valid_action = False
    terminal: TerminalStatus | None = None
    failure_reason: str | None = None
    selected_index: int | None = None

    if journal is not None and journal.exists():
        header, iterations, term_event = journal.load(repair=True)
        if header is not None and header.get("trajectory_id") != definition.trajectory_id:
            raise ContractViolation(
                f"journal belongs to {header.get('trajectory_id')}, "
                f"not {definition.trajectory_id}"
            )
        for event in iterations:
            assistant = Turn.from_doc(event["assistant"])
            turns.append(assistant)
            snapshot = IterationSnapshot.from_doc(event["snapshot"])
            snapshots.append(snapshot)
            definition.restore_iteration(snapshot, event.get("extra"))
            if assistant.parsed_action is not None:
                any_valid_action = True
            if event.get("feedback") is not None:
                turns.append(Turn.from_doc(event["feedback"]))
            completions_used += 1
        if term_event is not None:
            terminal = TerminalStatus(term_event["terminal_status"])
            failure_reason = term_event.get("failure_reason")
            annotations = list(term_event.get("annotations") or ())
            selected_index = term_event.get("selected_index")
        elif hasattr(backend, "advance"):
            backend.advance(completions_used)
    elif journal is not None:
        journal.write_header(definition.trajectory_id, definition.kind)

    allowed = ALLOWED_ACTIONS[definition.kind]

    while terminal is None and completions_used < config.max_completions:
        request = _request_from_turns(turns, config)
        try:
            completion = complete(request, backend, retry=retry, sleep=sleep)
        except BackendError as exc:
            # Completed iterations are already journaled; expose what exists.
            exc.partial_trajectory = Trajectory(
                trajectory_id=definition.trajectory_id,
                machine_kind=definition.kind,
                turns=tuple(turns),
                iteration_snapshots=tuple(snapshots),
                terminal_status=TerminalStatus.BACKEND_FAILURE,
                completions_used=completions_used,
                failure_reason=str(exc),
                annotations=tuple(annotations),
            )
            raise
        completions_used += 1
        last = completions_used >= config.max_completions

        try:
            action = parse_and_validate(completion.text, allowed, definition)
        except MalformedResponse as exc:
            assistant = Turn(role=Role.ASSISTANT, content=completion.text, usage=completion.usage)
            turns.append(assistant)
            snapshot = definition.current_snapshot()
            snapshots.append(snapshot)
            feedback_turn: Turn | None = None
            if not last:
                feedback_turn = Turn(role=Role.USER, content=render("correction", reason=exc.reason))
                turns.append(feedback_turn)
            if journal is not None:
                journal.append_iteration(
                    {
                        "assistant": assistant.to_doc(),
                        "malformed_reason": exc.reason,
                        "snapshot": snapshot.to_doc(),
                        "feedback": feedback_turn.to_doc() if feedback_turn else None,
                        "extra": None,
                    }
                )
            continue

        assistant = Turn(
            role=Role.ASSISTANT,
            content=completion.text,
            usage=completion.usage,
            parsed_action=action.to_doc(),
        )
        turns.append(assistant)
        any_valid_action = True

        if action.kind in (ActionKind.APPROVE, ActionKind.SELECT):
            snapshot, notes = definition.on_terminal_action(action)
            snapshots.append(snapshot)
            annotations.extend(notes)
            terminal = TerminalStatus.APPROVED
            selected_index = action.selection
            if journal is not None:
                journal.append_iteration(
                    {
                        "assistant": assistant.to_doc(),
                        "malformed_reason": None,
                        "snapshot": snapshot.to_doc(),
                        "feedback": None,
                        "extra": None,
                    }
                )
            break

        definition.apply_action(action)
        feedback_text, extra = definition.feedback()
        snapshot = definition.current_snapshot()
        snapshots.append(snapshot)
        feedback_turn = None
        if not last:
            feedback_turn = Turn(role=Role.USER, content=feedback_text)
            turns.append(feedback_turn)
        if journal is not None:
            journal.append_iteration(
                {
                    "assistant": assistant.to_doc(),
                    "malformed_reason": None,
                    "snapshot": snapshot.to_doc(),
                    "feedback": feedback_turn.to_doc() if feedback_turn else None,
                    "extra": extra,
                }
            )

    if terminal is None:
        if any_valid_action:
            terminal = TerminalStatus.EXHAUSTED
            failure_reason = f"no approval within {config.max_completions} completions"
        else:
            terminal = TerminalStatus.MALFORMED_FAILURE
            failure_reason = "every completion was malformed"
        if journal is not None:
            journal.append_terminal(terminal, failure_reason, annotations, selected_index)
    elif journal is not None:
        _, _, term_event = journal.load()
        if term_event is None:
            journal.append_terminal(terminal, failure_reason, annotations, selected_index)

    return Trajectory(
        trajectory_id=definition.trajectory_id,
        machine_kind=definition.kind,
        turns=tuple(turns),
        iteration_snapshots=tuple(snapshots),
        terminal_status=terminal,
        completions_used=completions_used,
        failure_reason=failure_reason,
        annotations=tuple(annotations),
    )


def parse_and_validate(
    text: str, allowed: frozenset[str], definition: MachineDefinition
) -> Action:
    action = parse_action(text, allowed)
    reason = definition.validate_action(action)
    if reason is not None:
        raise MalformedResponse(reason)
    return action
