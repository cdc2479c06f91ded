"""Core domain types shared by every stage of the pipeline.

Defines the data model: issue instances, search/replace edits, test scripts,
execution results, multi-turn trajectories, and candidate samples, plus the
run-store serialization helpers (one self-describing JSON document per
object, human-diffable, with a schema_version field).

All types are immutable values after construction (the single exception is
the cached diff rendering on Edit, which is filled in once at apply time)
and are safe to share between concurrent workers.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

SCHEMA_VERSION = 1

# stdout/stderr kept in feedback prompts are capped to bound prompt growth
DEFAULT_OUTPUT_CAP_BYTES = 20_000
TRUNCATION_MARKER = "\n...[output truncated]..."


class ContractViolation(ValueError):
    """A documented precondition of an operation was violated by the caller."""


def truncate_output(text: str, cap_bytes: int = DEFAULT_OUTPUT_CAP_BYTES) -> str:
    """Cap captured process output at ``cap_bytes`` of UTF-8, marking the cut."""
    raw = text.encode("utf-8")
    if len(raw) <= cap_bytes:
        return text
    head = raw[:cap_bytes].decode("utf-8", errors="ignore")
    return head + TRUNCATION_MARKER


# ---------------------------------------------------------------------------
# Enums
# ---------------------------------------------------------------------------


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


class MachineKind(str, Enum):
    TESTING = "testing"
    EDITING = "editing"
    SELECTION = "selection"


class TerminalStatus(str, Enum):
    APPROVED = "approved"
    EXHAUSTED = "exhausted"
    MALFORMED_FAILURE = "malformed_failure"
    BACKEND_FAILURE = "backend_failure"


NATIVE_SOURCE = "native"


# ---------------------------------------------------------------------------
# Token usage (shared with the llm module, defined here because Turn carries it)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenUsage:
    """Token counts for one exchange, split into the four billing classes."""

    input_tokens: int = 0
    output_tokens: int = 0
    cache_read_tokens: int = 0
    cache_write_tokens: int = 0

    def __post_init__(self) -> None:
        for name in ("input_tokens", "output_tokens", "cache_read_tokens", "cache_write_tokens"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be nonnegative")

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.input_tokens + other.input_tokens,
            self.output_tokens + other.output_tokens,
            self.cache_read_tokens + other.cache_read_tokens,
            self.cache_write_tokens + other.cache_write_tokens,
        )

    def to_doc(self) -> dict[str, int]:
        return {
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "cache_read_tokens": self.cache_read_tokens,
            "cache_write_tokens": self.cache_write_tokens,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "TokenUsage":
        return cls(
            input_tokens=int(doc.get("input_tokens", 0)),
            output_tokens=int(doc.get("output_tokens", 0)),
            cache_read_tokens=int(doc.get("cache_read_tokens", 0)),
            cache_write_tokens=int(doc.get("cache_write_tokens", 0)),
        )


ZERO_USAGE = TokenUsage()


# ---------------------------------------------------------------------------
# Instances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SourceFileFilter:
    """Include/exclude rules for the relevance scan.

    An empty extension allowlist admits every extension. A file is excluded
    when any of its path segments matches one of ``exclude_dirs``.
    """

    extensions: tuple[str, ...] = (".py",)
    exclude_dirs: tuple[str, ...] = ("tests", "test", "testing")

    def admits(self, relpath: str) -> bool:
        parts = Path(relpath).parts
        if any(seg in self.exclude_dirs for seg in parts[:-1]):
            return False
        if not self.extensions:
            return True
        return any(relpath.endswith(ext) for ext in self.extensions)

    def to_doc(self) -> dict[str, Any]:
        return {"extensions": list(self.extensions), "exclude_dirs": list(self.exclude_dirs)}

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "SourceFileFilter":
        return cls(
            extensions=tuple(doc.get("extensions", [])),
            exclude_dirs=tuple(doc.get("exclude_dirs", [])),
        )


@dataclass(frozen=True)
class Instance:
    """One issue task: an issue description plus a pristine codebase snapshot.

    ``oracle_eval`` is an optional command template (list of argv strings)
    that exits 0 when a candidate edit is correct; it supplies ground truth
    on fixture corpora and is the adapter point for a real evaluation
    harness.
    """

    instance_id: str
    issue_text: str
    codebase_ref: Path
    source_file_filter: SourceFileFilter = SourceFileFilter()
    gold_edit_files: tuple[str, ...] | None = None
    oracle_eval: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.instance_id:
            raise ContractViolation("instance_id must be nonempty")

    def validate(self) -> None:
        """Check the on-disk invariants (snapshot readable, gold files exist)."""
        root = Path(self.codebase_ref)
        if not root.is_dir() or not os.access(root, os.R_OK):
            raise ContractViolation(f"codebase_ref not a readable directory: {root}")
        for rel in self.gold_edit_files or ():
            if Path(rel).is_absolute() or ".." in Path(rel).parts:
                raise ContractViolation(f"gold_edit_file must be a plain relative path: {rel}")
            if not (root / rel).is_file():
                raise ContractViolation(f"gold_edit_file missing from snapshot: {rel}")

    def to_doc(self) -> dict[str, Any]:
        return {
            "kind": "instance",
            "schema_version": SCHEMA_VERSION,
            "instance_id": self.instance_id,
            "issue_text": self.issue_text,
            "codebase_ref": str(self.codebase_ref),
            "source_file_filter": self.source_file_filter.to_doc(),
            "gold_edit_files": list(self.gold_edit_files) if self.gold_edit_files is not None else None,
            "oracle_eval": list(self.oracle_eval) if self.oracle_eval is not None else None,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "Instance":
        gold = doc.get("gold_edit_files")
        oracle = doc.get("oracle_eval")
        return cls(
            instance_id=doc["instance_id"],
            issue_text=doc["issue_text"],
            codebase_ref=Path(doc["codebase_ref"]),
            source_file_filter=SourceFileFilter.from_doc(doc.get("source_file_filter", {})),
            gold_edit_files=tuple(gold) if gold is not None else None,
            oracle_eval=tuple(oracle) if oracle is not None else None,
        )


# ---------------------------------------------------------------------------
# Edits and tests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchReplaceBlock:
    """One exact-match search/replace operation against a single file."""

    file_path: str
    search_text: str
    replace_text: str

    def __post_init__(self) -> None:
        if not self.search_text:
            raise ContractViolation("search_text must be nonempty")
        p = Path(self.file_path)
        if p.is_absolute() or ".." in p.parts:
            raise ContractViolation(f"file_path must be relative without upward traversal: {self.file_path}")

    def to_doc(self) -> dict[str, str]:
        return {
            "file_path": self.file_path,
            "search_text": self.search_text,
            "replace_text": self.replace_text,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "SearchReplaceBlock":
        return cls(doc["file_path"], doc["search_text"], doc["replace_text"])


@dataclass
class Edit:
    """An ordered list of search/replace blocks over codebase files.

    ``unified_diff`` is the cached rendering after the edit has been applied
    to a workspace ("" until then). Externally sourced edits carry a
    pre-rendered diff and no blocks; they are applied through the patch
    path instead of search/replace. The diff's character length is the
    tie-break key wherever a shorter edit wins.
    """

    blocks: tuple[SearchReplaceBlock, ...] = ()
    unified_diff: str = ""

    @classmethod
    def from_blocks(cls, blocks: Iterable[SearchReplaceBlock]) -> "Edit":
        return cls(blocks=tuple(blocks))

    @classmethod
    def from_diff(cls, diff_text: str) -> "Edit":
        return cls(blocks=(), unified_diff=diff_text)

    @property
    def is_external(self) -> bool:
        return not self.blocks and bool(self.unified_diff)

    @property
    def is_empty(self) -> bool:
        return not self.blocks and not self.unified_diff

    @property
    def diff_length(self) -> int:
        return len(self.unified_diff)

    def to_doc(self) -> dict[str, Any]:
        return {
            "kind": "edit",
            "schema_version": SCHEMA_VERSION,
            "blocks": [b.to_doc() for b in self.blocks],
            "unified_diff": self.unified_diff,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "Edit":
        return cls(
            blocks=tuple(SearchReplaceBlock.from_doc(b) for b in doc.get("blocks", [])),
            unified_diff=doc.get("unified_diff", ""),
        )


#: exit code meaning "the issue is fixed"
EXIT_FIXED = 0
#: exit code meaning "the issue is still present"
EXIT_ISSUE_PRESENT = 2


@dataclass(frozen=True)
class TestScript:
    """A standalone script that signals its verdict through its exit code.

    Exit 0 means the issue is fixed, exit 2 means the issue is present, and
    any other exit code or a timeout marks the script itself as broken.
    ``interpreter_cmd`` is a run-level setting, not a per-script choice; the
    "{script}" placeholder is replaced with the script path at execution.
    """

    __test__ = False  # not a pytest class despite the name

    script_text: str
    interpreter_cmd: tuple[str, ...] = ("python3", "{script}")

    def to_doc(self) -> dict[str, Any]:
        return {
            "kind": "test_script",
            "schema_version": SCHEMA_VERSION,
            "script_text": self.script_text,
            "interpreter_cmd": list(self.interpreter_cmd),
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "TestScript":
        return cls(doc["script_text"], tuple(doc.get("interpreter_cmd", ("python3", "{script}"))))


@dataclass(frozen=True)
class ExecutionResult:
    """Outcome of running one script in a workspace.

    ``exit_code`` is absent when the run timed out. Captured output is
    truncated at the configured byte cap before it is stored here.
    """

    exit_code: int | None
    stdout: str
    stderr: str
    wall_time: float
    timed_out: bool = False

    def __post_init__(self) -> None:
        if self.timed_out and self.exit_code is not None:
            raise ContractViolation("timed_out implies exit_code is absent")

    def to_doc(self) -> dict[str, Any]:
        return {
            "kind": "execution_result",
            "schema_version": SCHEMA_VERSION,
            "exit_code": self.exit_code,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "wall_time": self.wall_time,
            "timed_out": self.timed_out,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "ExecutionResult":
        return cls(
            exit_code=doc["exit_code"],
            stdout=doc["stdout"],
            stderr=doc["stderr"],
            wall_time=doc["wall_time"],
            timed_out=doc["timed_out"],
        )


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Turn:
    """One message in a machine conversation.

    Only assistant turns carry token usage; user and system turns always
    have zero output usage.
    """

    role: Role
    content: str
    usage: TokenUsage = ZERO_USAGE
    parsed_action: dict[str, Any] | None = None

    def __post_init__(self) -> None:
        if self.role is not Role.ASSISTANT and self.usage.output_tokens != 0:
            raise ContractViolation("non-assistant turns carry zero output usage")

    def to_doc(self) -> dict[str, Any]:
        return {
            "kind": "turn",
            "schema_version": SCHEMA_VERSION,
            "role": self.role.value,
            "content": self.content,
            "usage": self.usage.to_doc(),
            "parsed_action": self.parsed_action,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "Turn":
        return cls(
            role=Role(doc["role"]),
            content=doc["content"],
            usage=TokenUsage.from_doc(doc.get("usage", {})),
            parsed_action=doc.get("parsed_action"),
        )


@dataclass(frozen=True)
class IterationSnapshot:
    """State of the working artifacts after one assistant completion.

    Every completion gets a snapshot, and a snapshot always records the
    latest test AND edit even when only one of them (or neither, for a
    malformed reply) changed.
    """

    test: TestScript | None = None
    edit: Edit | None = None
    selection: int | None = None

    def to_doc(self) -> dict[str, Any]:
        return {
            "test": self.test.to_doc() if self.test else None,
            "edit": self.edit.to_doc() if self.edit else None,
            "selection": self.selection,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "IterationSnapshot":
        return cls(
            test=TestScript.from_doc(doc["test"]) if doc.get("test") else None,
            edit=Edit.from_doc(doc["edit"]) if doc.get("edit") else None,
            selection=doc.get("selection"),
        )


@dataclass(frozen=True)
class Trajectory:
    """Full record of one multi-turn machine run.

    ``annotations`` records oddities that do not change the terminal status,
    e.g. an approval granted while the approved pair still failed its own
    two-sided check.
    """

    trajectory_id: str
    machine_kind: MachineKind
    turns: tuple[Turn, ...]
    iteration_snapshots: tuple[IterationSnapshot, ...]
    terminal_status: TerminalStatus
    completions_used: int
    failure_reason: str | None = None
    annotations: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        assistant_turns = sum(1 for t in self.turns if t.role is Role.ASSISTANT)
        if assistant_turns != self.completions_used:
            raise ContractViolation(
                f"completions_used ({self.completions_used}) must equal the number of "
                f"assistant turns ({assistant_turns})"
            )
        if len(self.iteration_snapshots) != self.completions_used:
            raise ContractViolation(
                "iteration_snapshots must have exactly one entry per assistant completion"
            )

    @property
    def final_snapshot(self) -> IterationSnapshot | None:
        return self.iteration_snapshots[-1] if self.iteration_snapshots else None

    @property
    def usage_total(self) -> TokenUsage:
        total = ZERO_USAGE
        for t in self.turns:
            total = total + t.usage
        return total

    def usage_through_completion(self, i: int) -> TokenUsage:
        """Total usage of assistant completions with ordinal <= i (1-based)."""
        total = ZERO_USAGE
        seen = 0
        for t in self.turns:
            if t.role is Role.ASSISTANT:
                seen += 1
                if seen > i:
                    break
                total = total + t.usage
        return total

    def to_doc(self) -> dict[str, Any]:
        return {
            "kind": "trajectory",
            "schema_version": SCHEMA_VERSION,
            "trajectory_id": self.trajectory_id,
            "machine_kind": self.machine_kind.value,
            "turns": [t.to_doc() for t in self.turns],
            "iteration_snapshots": [s.to_doc() for s in self.iteration_snapshots],
            "terminal_status": self.terminal_status.value,
            "completions_used": self.completions_used,
            "failure_reason": self.failure_reason,
            "annotations": list(self.annotations),
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "Trajectory":
        return cls(
            trajectory_id=doc["trajectory_id"],
            machine_kind=MachineKind(doc["machine_kind"]),
            turns=tuple(Turn.from_doc(t) for t in doc["turns"]),
            iteration_snapshots=tuple(IterationSnapshot.from_doc(s) for s in doc["iteration_snapshots"]),
            terminal_status=TerminalStatus(doc["terminal_status"]),
            completions_used=doc["completions_used"],
            failure_reason=doc.get("failure_reason"),
            annotations=tuple(doc.get("annotations", ())),
        )


# ---------------------------------------------------------------------------
# Candidates and correctness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateSample:
    """One candidate edit for an instance, native or externally sourced.

    Native candidates always carry the trajectory they came from and the
    test generated alongside the edit; external candidates may lack both.
    ``candidate_id`` is the deterministic last-level tie-break key.
    """

    instance_id: str
    candidate_id: str
    edit: Edit
    test: TestScript | None = None
    source: str = NATIVE_SOURCE
    trajectory_id: str | None = None

    def __post_init__(self) -> None:
        if self.source == NATIVE_SOURCE:
            if self.trajectory_id is None or self.test is None:
                raise ContractViolation("native candidates require a trajectory_id and a test")

    @property
    def is_native(self) -> bool:
        return self.source == NATIVE_SOURCE

    def to_doc(self) -> dict[str, Any]:
        return {
            "kind": "candidate_sample",
            "schema_version": SCHEMA_VERSION,
            "instance_id": self.instance_id,
            "candidate_id": self.candidate_id,
            "edit": self.edit.to_doc(),
            "test": self.test.to_doc() if self.test else None,
            "source": self.source,
            "trajectory_id": self.trajectory_id,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "CandidateSample":
        return cls(
            instance_id=doc["instance_id"],
            candidate_id=doc["candidate_id"],
            edit=Edit.from_doc(doc["edit"]),
            test=TestScript.from_doc(doc["test"]) if doc.get("test") else None,
            source=doc.get("source", NATIVE_SOURCE),
            trajectory_id=doc.get("trajectory_id"),
        )


def candidate_tie_break_key(candidate: CandidateSample) -> tuple[int, str]:
    """Secondary ordering applied after pass counts: shorter diff, then id."""
    return (candidate.edit.diff_length, candidate.candidate_id)


@dataclass(frozen=True)
class CorrectnessRecord:
    """Oracle verdicts for every candidate of one instance, in candidate order."""

    instance_id: str
    flags: tuple[bool, ...]

    def to_doc(self) -> dict[str, Any]:
        return {
            "kind": "correctness_record",
            "schema_version": SCHEMA_VERSION,
            "instance_id": self.instance_id,
            "flags": list(self.flags),
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "CorrectnessRecord":
        return cls(instance_id=doc["instance_id"], flags=tuple(bool(f) for f in doc["flags"]))


def is_resolved(correctness: CorrectnessRecord, selected_index: int) -> bool:
    """Whether the candidate finally submitted for this instance is correct."""
    if not 0 <= selected_index < len(correctness.flags):
        raise ContractViolation(
            f"selected_index {selected_index} out of range for {len(correctness.flags)} candidates"
        )
    return correctness.flags[selected_index]


# ---------------------------------------------------------------------------
# Run-store serialization
# ---------------------------------------------------------------------------


def canonical_json(doc: Any) -> str:
    """Render a document deterministically: sorted keys, two-space indent."""
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_artifact(path: Path, doc: Any) -> None:
    """Atomically write one artifact document (UTF-8 JSON, human-diffable)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    data = canonical_json(doc).encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def read_artifact(path: Path) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
