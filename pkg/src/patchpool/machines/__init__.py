"""Feedback-loop state machines: action grammar, generic engine, and the
three concrete machines (testing, editing, selection)."""

from patchpool.machines.actions import (
    ALLOWED_ACTIONS,
    Action,
    ActionKind,
    MalformedResponse,
    parse_action,
)
from patchpool.machines.engine import (
    EDITING_DEFAULTS,
    MachineConfig,
    MachineDefinition,
    SELECTION_DEFAULTS,
    TESTING_DEFAULTS,
    TrajectoryJournal,
    run_machine,
)
from patchpool.machines.runners import (
    ensure_candidate_diffs,
    SelectionOutcome,
    render_execution_result,
    run_editing_machine,
    run_selection_machine,
    run_testing_machine,
)

__all__ = [
    "ALLOWED_ACTIONS",
    "Action",
    "ActionKind",
    "EDITING_DEFAULTS",
    "MachineConfig",
    "MachineDefinition",
    "MalformedResponse",
    "SELECTION_DEFAULTS",
    "SelectionOutcome",
    "ensure_candidate_diffs",
    "TESTING_DEFAULTS",
    "TrajectoryJournal",
    "parse_action",
    "render_execution_result",
    "run_editing_machine",
    "run_machine",
    "run_selection_machine",
    "run_testing_machine",
]
