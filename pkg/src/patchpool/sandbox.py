"""Isolated codebase copies, exact-match edit application, script execution.

A Workspace is a private copy of an instance's snapshot. Edits land through
one of two routes: native search/replace blocks (each search text must match
exactly once), or a pre-rendered unified diff for externally sourced
candidates. Both routes stage every change in memory and only touch disk
after the entire edit has validated, so any error leaves the workspace
byte-identical to the pre-apply state.

Scripts run as their own process group with a hard timeout; at expiry the
whole group is killed and the result is marked timed_out with no exit code.
"""

from __future__ import annotations

import difflib
import hashlib
import os
import shutil
import signal
import subprocess
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from patchpool.core import (
    ContractViolation,
    Edit,
    ExecutionResult,
    Instance,
    TestScript,
    truncate_output,
)

DEFAULT_TIMEOUT_S = 100.0
DEFAULT_ENV_ALLOWLIST = ("PATH", "HOME", "LANG", "LC_ALL", "TMPDIR")

_SCRIPT_BASENAME = "_candidate_test_script"


class SandboxError(Exception):
    """Base class for sandbox failures."""


class MaterializationError(SandboxError):
    pass


class ApplyError(SandboxError):
    """An edit could not be applied; the workspace is unmodified."""


class MissingFileError(ApplyError):
    def __init__(self, file_path: str, block_index: int):
        super().__init__(f"block {block_index}: file not found: {file_path}")
        self.file_path = file_path
        self.block_index = block_index


class NoMatchError(ApplyError):
    def __init__(self, file_path: str, block_index: int):
        super().__init__(f"block {block_index}: search text not found in {file_path}")
        self.file_path = file_path
        self.block_index = block_index


class AmbiguousMatchError(ApplyError):
    def __init__(self, file_path: str, block_index: int, count: int):
        super().__init__(
            f"block {block_index}: search text found {count} times in {file_path}; must be unique"
        )
        self.file_path = file_path
        self.block_index = block_index
        self.count = count


class PatchError(ApplyError):
    """A unified diff could not be parsed or located in the workspace."""


class AlreadyAppliedError(SandboxError):
    pass


class InterpreterNotFoundError(SandboxError):
    pass


class EvaluationError(SandboxError):
    """The oracle evaluator itself failed; distinct from an incorrect edit."""


@dataclass(frozen=True)
class SandboxPolicy:
    """Run-level execution settings shared by every workspace."""

    interpreter_cmd: tuple[str, ...] = ("python3", "{script}")
    timeout_s: float = DEFAULT_TIMEOUT_S
    env_allowlist: tuple[str, ...] = DEFAULT_ENV_ALLOWLIST
    output_cap_bytes: int = 20_000
    workspace_base: Path | None = None


@dataclass
class Workspace:
    """One disposable private copy of a snapshot. Single-occupancy."""

    workspace_id: str
    root: Path
    applied_edit: Edit | None = None

    def dispose(self) -> None:
        shutil.rmtree(self.root, ignore_errors=True)

    def __enter__(self) -> "Workspace":
        return self

    def __exit__(self, *exc_info) -> None:
        self.dispose()


def materialize(instance: Instance, policy: SandboxPolicy | None = None) -> Workspace:
    """Copy the instance snapshot into a fresh private directory."""
    base = policy.workspace_base if policy and policy.workspace_base else None
    src = Path(instance.codebase_ref)
    if not src.is_dir():
        raise MaterializationError(f"snapshot missing or unreadable: {src}")
    if base is not None:
        base.mkdir(parents=True, exist_ok=True)
    root = Path(tempfile.mkdtemp(prefix=f"ws-{instance.instance_id}-", dir=base))
    dest = root / "repo"
    try:
        shutil.copytree(src, dest)
    except OSError as exc:
        shutil.rmtree(root, ignore_errors=True)
        raise MaterializationError(f"failed to copy snapshot: {exc}") from exc
    return Workspace(workspace_id=root.name, root=dest)


def tree_digest(root: Path) -> str:
    """Order-independent digest of a directory tree's paths and contents."""
    h = hashlib.sha256()
    root = Path(root)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode("utf-8"))
        h.update(b"\x00")
        h.update(path.read_bytes())
        h.update(b"\x00")
    return h.hexdigest()


def _normalize(text: str) -> str:
    return text.replace("\r\n", "\n").replace("\r", "\n")


# ---------------------------------------------------------------------------
# edit application
# ---------------------------------------------------------------------------


def _apply_blocks(ws_root: Path, edit: Edit) -> dict[str, tuple[str, str]]:
    """Stage all search/replace blocks; returns {path: (before, after)}."""
    staged: dict[str, str] = {}
    originals: dict[str, str] = {}
    for i, block in enumerate(edit.blocks):
        path = block.file_path
        if path not in staged:
            full = ws_root / path
            if not full.is_file():
                raise MissingFileError(path, i)
            text = _normalize(full.read_text(encoding="utf-8"))
            staged[path] = text
            originals[path] = text
        current = staged[path]
        count = current.count(block.search_text)
        if count == 0:
            raise NoMatchError(path, i)
        if count > 1:
            raise AmbiguousMatchError(path, i, count)
        staged[path] = current.replace(block.search_text, block.replace_text, 1)
    return {p: (originals[p], staged[p]) for p in staged}


def _render_diff(changes: dict[str, tuple[str, str]], order: list[str]) -> str:
    parts = []
    for path in order:
        before, after = changes[path]
        if before == after:
            continue
        lines = difflib.unified_diff(
            before.splitlines(keepends=True),
            after.splitlines(keepends=True),
            fromfile=f"a/{path}",
            tofile=f"b/{path}",
        )
        parts.append("".join(lines))
    return "".join(parts)


# --- unified-diff application (external candidates) ---


@dataclass
class _Hunk:
    old_start: int  # 1-based line in the old file
    old_lines: list[str] = field(default_factory=list)
    new_lines: list[str] = field(default_factory=list)
    no_newline_old: bool = False
    no_newline_new: bool = False


@dataclass
class _FilePatch:
    old_path: str | None  # None = file creation
    new_path: str | None  # None = file deletion
    hunks: list[_Hunk] = field(default_factory=list)


def _strip_diff_prefix(path: str) -> str:
    for prefix in ("a/", "b/"):
        if path.startswith(prefix):
            return path[len(prefix) :]
    return path


def _parse_hunk_header(line: str) -> tuple[int, int, int]:
    """Parse '@@ -l[,c] +l[,c] @@' into (old_start, old_count, new_count)."""
    parts = line.split("@@")
    if len(parts) < 3:
        raise PatchError(f"malformed hunk header: {line}")
    try:
        old_spec, new_spec = parts[1].strip().split(" ")[:2]
        old_bits = old_spec.lstrip("-").split(",")
        new_bits = new_spec.lstrip("+").split(",")
        old_start = int(old_bits[0])
        old_count = int(old_bits[1]) if len(old_bits) > 1 else 1
        new_count = int(new_bits[1]) if len(new_bits) > 1 else 1
    except (ValueError, IndexError) as exc:
        raise PatchError(f"malformed hunk header: {line}") from exc
    return old_start, old_count, new_count


_GIT_NOISE_PREFIXES = (
    "diff --git",
    "index ",
    "old mode",
    "new mode",
    "new file mode",
    "deleted file mode",
    "similarity index",
    "rename from",
    "rename to",
)


def _parse_unified_diff(diff_text: str) -> list[_FilePatch]:
    patches: list[_FilePatch] = []
    current: _FilePatch | None = None
    lines = _normalize(diff_text).split("\n")
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("Binary files"):
            raise PatchError("binary patches are not supported")
        if line.startswith(_GIT_NOISE_PREFIXES):
            i += 1
            continue
        if line.startswith("--- "):
            if i + 1 >= len(lines) or not lines[i + 1].startswith("+++ "):
                raise PatchError("'---' header without matching '+++'")
            old_raw = line[4:].split("\t")[0].strip()
            new_raw = lines[i + 1][4:].split("\t")[0].strip()
            old_path = None if old_raw == "/dev/null" else _strip_diff_prefix(old_raw)
            new_path = None if new_raw == "/dev/null" else _strip_diff_prefix(new_raw)
            if old_path is None and new_path is None:
                raise PatchError("patch with both sides /dev/null")
            current = _FilePatch(old_path=old_path, new_path=new_path)
            patches.append(current)
            i += 2
            continue
        if line.startswith("@@"):
            if current is None:
                raise PatchError("hunk before any file header")
            old_start, old_count, new_count = _parse_hunk_header(line)
            hunk = _Hunk(old_start=old_start)
            current.hunks.append(hunk)
            i += 1
            old_seen = new_seen = 0
            # consume exactly the lines the header promises
            while i < len(lines) and (old_seen < old_count or new_seen < new_count):
                body_line = lines[i]
                if body_line.startswith("\\"):
                    prev = lines[i - 1]
                    if prev.startswith("+"):
                        hunk.no_newline_new = True
                    elif prev.startswith("-"):
                        hunk.no_newline_old = True
                    else:
                        hunk.no_newline_old = hunk.no_newline_new = True
                    i += 1
                    continue
                tag = body_line[0] if body_line else " "
                body = body_line[1:] if body_line else ""
                if tag == " ":
                    hunk.old_lines.append(body)
                    hunk.new_lines.append(body)
                    old_seen += 1
                    new_seen += 1
                elif tag == "-":
                    hunk.old_lines.append(body)
                    old_seen += 1
                elif tag == "+":
                    hunk.new_lines.append(body)
                    new_seen += 1
                else:
                    raise PatchError(f"unexpected line inside hunk: {body_line!r}")
                i += 1
            if old_seen != old_count or new_seen != new_count:
                raise PatchError("hunk shorter than its header promises")
            # a trailing no-newline marker can follow the last hunk line
            if i < len(lines) and lines[i].startswith("\\"):
                prev = lines[i - 1]
                if prev.startswith("+"):
                    hunk.no_newline_new = True
                elif prev.startswith("-"):
                    hunk.no_newline_old = True
                else:
                    hunk.no_newline_old = hunk.no_newline_new = True
                i += 1
            continue
        # anything else (blank separators, prose) is skipped
        i += 1
    if not patches:
        raise PatchError("no file patches found in diff text")
    return patches


def _locate_block(haystack: list[str], needle: list[str], hint: int) -> int:
    """Index where needle occurs in haystack: stated position first, then a
    unique match anywhere."""
    n = len(needle)
    if n == 0:
        return max(0, min(hint, len(haystack)))
    if 0 <= hint <= len(haystack) - n and haystack[hint : hint + n] == needle:
        return hint
    matches = [
        idx for idx in range(len(haystack) - n + 1) if haystack[idx : idx + n] == needle
    ]
    if not matches:
        raise PatchError("hunk context not found in file")
    if len(matches) > 1:
        raise PatchError(f"hunk context is ambiguous ({len(matches)} matches)")
    return matches[0]


def _apply_file_patch(ws_root: Path, fp: _FilePatch) -> tuple[str, str | None, str | None]:
    """Returns (path, before_text, after_text); None marks absent sides."""
    target = fp.new_path if fp.new_path is not None else fp.old_path
    assert target is not None
    p = Path(target)
    if p.is_absolute() or ".." in p.parts:
        raise PatchError(f"patch path escapes the workspace: {target}")

    if fp.old_path is None:
        # file creation
        if (ws_root / target).exists():
            raise PatchError(f"creation patch but file exists: {target}")
        new_lines: list[str] = []
        no_newline = False
        for h in fp.hunks:
            new_lines.extend(h.new_lines)
            no_newline = h.no_newline_new
        text = "\n".join(new_lines)
        if not no_newline and new_lines:
            text += "\n"
        return target, None, text

    full = ws_root / fp.old_path
    if not full.is_file():
        raise PatchError(f"patched file missing: {fp.old_path}")
    before = _normalize(full.read_text(encoding="utf-8"))

    if fp.new_path is None:
        # deletion: content check is advisory; the patch wins
        return fp.old_path, before, None

    had_trailing_newline = before.endswith("\n")
    file_lines = before.split("\n") if before else []
    if had_trailing_newline:
        file_lines = file_lines[:-1]

    offset = 0
    ends_with_newline = had_trailing_newline
    for h in fp.hunks:
        hint = h.old_start - 1 + offset
        pos = _locate_block(file_lines, h.old_lines, hint)
        file_lines[pos : pos + len(h.old_lines)] = h.new_lines
        offset += len(h.new_lines) - len(h.old_lines)
        # a hunk whose replacement reaches EOF dictates the newline state there
        if pos + len(h.new_lines) == len(file_lines):
            ends_with_newline = not h.no_newline_new

    after = "\n".join(file_lines)
    if ends_with_newline and file_lines:
        after += "\n"
    return (fp.new_path if fp.new_path is not None else fp.old_path), before, after


def apply_edit(ws: Workspace, edit: Edit) -> str:
    """Apply an edit to the workspace, all-or-nothing; returns a unified diff.

    Search/replace blocks require their search text to match exactly once in
    the current file contents, applied in order so later blocks see earlier
    replacements. External edits route through the unified-diff applier. Any
    failure leaves every workspace file untouched. The rendered diff is
    cached on the edit unless the edit already carried one.
    """
    if ws.applied_edit is not None:
        raise AlreadyAppliedError(f"workspace {ws.workspace_id} already has an edit applied")

    if edit.blocks:
        changes = _apply_blocks(ws.root, edit)
        order: list[str] = []
        for b in edit.blocks:
            if b.file_path not in order:
                order.append(b.file_path)
        writes = {p: after for p, (before, after) in changes.items()}
        deletions: set[str] = set()
        diff = _render_diff(changes, order)
    elif edit.unified_diff:
        patches = _parse_unified_diff(edit.unified_diff)
        writes = {}
        deletions = set()
        diff_parts = []
        order = []
        for fp in patches:
            path, before, after = _apply_file_patch(ws.root, fp)
            if after is None:
                deletions.add(fp.old_path)  # type: ignore[arg-type]
                before_lines = (before or "").splitlines(keepends=True)
                diff_parts.append(
                    "".join(
                        difflib.unified_diff(
                            before_lines, [], fromfile=f"a/{path}", tofile="/dev/null"
                        )
                    )
                )
                continue
            if fp.old_path is not None and fp.new_path is not None and fp.old_path != fp.new_path:
                deletions.add(fp.old_path)  # rename: drop the old location
            writes[path] = after
            order.append(path)
            before_lines = (before or "").splitlines(keepends=True)
            diff_parts.append(
                "".join(
                    difflib.unified_diff(
                        before_lines,
                        after.splitlines(keepends=True),
                        fromfile=f"a/{path}" if before is not None else "/dev/null",
                        tofile=f"b/{path}",
                    )
                )
            )
        diff = "".join(diff_parts)
    else:
        # the empty edit is a clean no-op
        ws.applied_edit = edit
        return ""

    # staging validated; now touch disk
    for path, text in writes.items():
        full = ws.root / path
        full.parent.mkdir(parents=True, exist_ok=True)
        full.write_text(text, encoding="utf-8")
    for path in deletions:
        (ws.root / path).unlink()

    if not edit.unified_diff:
        edit.unified_diff = diff
    ws.applied_edit = edit
    return diff


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


def _script_env(policy: SandboxPolicy) -> dict[str, str]:
    return {k: os.environ[k] for k in policy.env_allowlist if k in os.environ}


def run_script(
    ws: Workspace,
    test: TestScript,
    policy: SandboxPolicy | None = None,
    timeout_s: float | None = None,
) -> ExecutionResult:
    """Execute a test script from the workspace root and capture the outcome.

    The script runs in its own process group; on timeout the whole group is
    SIGKILLed and the result carries timed_out=True with no exit code.
    """
    policy = policy or SandboxPolicy()
    timeout = timeout_s if timeout_s is not None else policy.timeout_s
    script_path = ws.root / _SCRIPT_BASENAME
    script_path.write_text(test.script_text, encoding="utf-8")
    argv = [part.replace("{script}", str(script_path)) for part in test.interpreter_cmd]

    start = time.monotonic()
    try:
        proc = subprocess.Popen(
            argv,
            cwd=ws.root,
            env=_script_env(policy),
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            start_new_session=True,
        )
    except FileNotFoundError as exc:
        raise InterpreterNotFoundError(f"interpreter not found: {argv[0]}") from exc

    try:
        out, err = proc.communicate(timeout=timeout)
        timed_out = False
        exit_code: int | None = proc.returncode
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        out, err = proc.communicate()
        timed_out = True
        exit_code = None
    wall = time.monotonic() - start

    cap = policy.output_cap_bytes
    return ExecutionResult(
        exit_code=exit_code,
        stdout=truncate_output(out.decode("utf-8", errors="replace"), cap),
        stderr=truncate_output(err.decode("utf-8", errors="replace"), cap),
        wall_time=wall,
        timed_out=timed_out,
    )


def evaluate_candidate(
    instance: Instance, edit: Edit, policy: SandboxPolicy | None = None
) -> bool:
    """Ground-truth check of one candidate edit via the instance's oracle.

    Returns False for an edit that fails to apply or whose oracle command
    exits nonzero; raises EvaluationError when the oracle itself cannot run
    (so infrastructure failures are never scored as incorrect edits).
    """
    if not instance.oracle_eval:
        raise ContractViolation(f"instance {instance.instance_id} has no oracle_eval configured")
    policy = policy or SandboxPolicy()
    with materialize(instance, policy) as ws:
        try:
            apply_edit(ws, edit)
        except ApplyError:
            return False
        argv = [part.replace("{workspace}", str(ws.root)) for part in instance.oracle_eval]
        try:
            proc = subprocess.run(
                argv,
                cwd=ws.root,
                env=_script_env(policy),
                capture_output=True,
                timeout=policy.timeout_s,
            )
        except FileNotFoundError as exc:
            raise EvaluationError(f"oracle command not found: {argv[0]}") from exc
        except subprocess.TimeoutExpired as exc:
            raise EvaluationError(f"oracle timed out after {policy.timeout_s}s") from exc
        return proc.returncode == 0


def edit_target_paths(edit: Edit) -> tuple[str, ...]:
    """Relative paths an edit touches, in first-mention order.

    External diffs that cannot be parsed yield an empty tuple rather than an
    error; callers treating this as "no displayable files" is the right
    degradation for prompt assembly.
    """
    paths: list[str] = []
    if edit.blocks:
        for block in edit.blocks:
            if block.file_path not in paths:
                paths.append(block.file_path)
        return tuple(paths)
    if not edit.unified_diff.strip():
        return ()
    try:
        patches = _parse_unified_diff(edit.unified_diff)
    except PatchError:
        return ()
    for fp in patches:
        target = fp.new_path or fp.old_path
        if target is not None and target not in paths:
            paths.append(target)
    return tuple(paths)
