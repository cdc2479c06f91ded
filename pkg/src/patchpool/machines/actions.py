"""Parsing of model replies into machine actions.

A reply must contain exactly one fenced action block.  The fence info string
names the action: ``test``, ``edit``, ``approve``, or ``select:<index>``.
Fences with any other info string (or none) are treated as ordinary prose and
ignored, including everything inside them.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from patchpool.core import ContractViolation, MachineKind, SearchReplaceBlock

_SELECT_RE = re.compile(r"^select\s*:\s*(\d+)$")

_BEGIN = "<<<BEGIN"
_SEARCH = "<<<SEARCH"
_REPLACE = "<<<REPLACE"
_END = "<<<END"


class ActionKind:
    WRITE_TEST = "write_test"
    WRITE_EDIT = "write_edit"
    APPROVE = "approve"
    SELECT = "select"


ALLOWED_ACTIONS: dict[MachineKind, frozenset[str]] = {
    MachineKind.TESTING: frozenset({ActionKind.WRITE_TEST, ActionKind.APPROVE}),
    MachineKind.EDITING: frozenset(
        {ActionKind.WRITE_EDIT, ActionKind.WRITE_TEST, ActionKind.APPROVE}
    ),
    MachineKind.SELECTION: frozenset({ActionKind.WRITE_TEST, ActionKind.SELECT}),
}


class MalformedResponse(Exception):
    """Reply that does not resolve to exactly one permitted action."""

    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class Action:
    kind: str
    script_text: str | None = None
    blocks: tuple[SearchReplaceBlock, ...] = field(default_factory=tuple)
    selection: int | None = None

    def to_doc(self) -> dict:
        doc: dict = {"kind": self.kind}
        if self.script_text is not None:
            doc["script_text"] = self.script_text
        if self.blocks:
            doc["blocks"] = [b.to_doc() for b in self.blocks]
        if self.selection is not None:
            doc["selection"] = self.selection
        return doc


def _collect_fences(text: str) -> list[tuple[str, list[str]]]:
    """Return (info_string, payload_lines) for every fenced block.

    Nothing inside an open fence is inspected except its closing line, so
    action markers quoted inside e.g. a ```python block do not count.
    """
    fences: list[tuple[str, list[str]]] = []
    info: str | None = None
    payload: list[str] = []
    for line in text.split("\n"):
        stripped = line.strip()
        if info is None:
            if stripped.startswith("```") and stripped != "```":
                info = stripped[3:].strip()
                payload = []
            elif stripped == "```":
                # Opening fence with no info string: anonymous block.
                info = ""
                payload = []
        else:
            if stripped == "```":
                fences.append((info, payload))
                info = None
            else:
                payload.append(line)
    if info is not None and _is_action_tag(info):
        raise MalformedResponse(f"unclosed ```{info} fence")
    return fences


def _is_action_tag(tag: str) -> bool:
    return tag in ("test", "edit", "approve") or _SELECT_RE.match(tag) is not None


def _parse_edit_payload(lines: list[str]) -> tuple[SearchReplaceBlock, ...]:
    blocks: list[SearchReplaceBlock] = []
    i = 0
    n = len(lines)
    while i < n:
        line = lines[i]
        if not line.strip():
            i += 1
            continue
        if not line.startswith(_BEGIN):
            raise MalformedResponse(f"expected {_BEGIN} <path>, got: {line.strip()[:80]}")
        path = line[len(_BEGIN):].strip()
        if not path:
            raise MalformedResponse(f"{_BEGIN} marker is missing a file path")
        i += 1
        if i >= n or lines[i].strip() != _SEARCH:
            raise MalformedResponse(f"expected {_SEARCH} after {_BEGIN} {path}")
        i += 1
        search_lines: list[str] = []
        while i < n and lines[i].strip() != _REPLACE:
            if lines[i].startswith(_BEGIN) or lines[i].strip() == _END:
                raise MalformedResponse(f"missing {_REPLACE} marker in block for {path}")
            search_lines.append(lines[i])
            i += 1
        if i >= n:
            raise MalformedResponse(f"missing {_REPLACE} marker in block for {path}")
        i += 1
        replace_lines: list[str] = []
        while i < n and lines[i].strip() != _END:
            if lines[i].startswith(_BEGIN):
                raise MalformedResponse(f"missing {_END} marker in block for {path}")
            replace_lines.append(lines[i])
            i += 1
        if i >= n:
            raise MalformedResponse(f"missing {_END} marker in block for {path}")
        i += 1
        try:
            blocks.append(
                SearchReplaceBlock(
                    file_path=path,
                    search_text="\n".join(search_lines),
                    replace_text="\n".join(replace_lines),
                )
            )
        except ContractViolation as exc:
            raise MalformedResponse(f"invalid edit block for {path}: {exc}") from exc
    if not blocks:
        raise MalformedResponse("edit block contains no search/replace groups")
    return tuple(blocks)


def parse_action(text: str, allowed: frozenset[str]) -> Action:
    """Extract the single action from a model reply.

    Raises MalformedResponse when there is no action block, more than one,
    an unparseable payload, or an action the calling machine does not permit.
    """
    action_fences = [(tag, body) for tag, body in _collect_fences(text) if _is_action_tag(tag)]
    if not action_fences:
        raise MalformedResponse("reply contains no action block")
    if len(action_fences) > 1:
        tags = ", ".join(tag for tag, _ in action_fences)
        raise MalformedResponse(f"reply contains {len(action_fences)} action blocks ({tags})")
    tag, body = action_fences[0]

    if tag == "test":
        action = _parse_test(body)
    elif tag == "edit":
        action = Action(kind=ActionKind.WRITE_EDIT, blocks=_parse_edit_payload(body))
    elif tag == "approve":
        action = Action(kind=ActionKind.APPROVE)
    else:
        match = _SELECT_RE.match(tag)
        assert match is not None
        action = Action(kind=ActionKind.SELECT, selection=int(match.group(1)))

    if action.kind not in allowed:
        raise MalformedResponse(f"action {action.kind} is not permitted for this machine")
    return action


def _parse_test(body: list[str]) -> Action:
    script = "\n".join(body)
    if not script.strip():
        raise MalformedResponse("test block is empty")
    return Action(kind=ActionKind.WRITE_TEST, script_text=script)
