"""Codebase context identification: relevance scan, repeated ranking, assembly.

The pipeline reads every candidate source file (chunking oversized ones),
asks the model for a relevance verdict and summary per file, ranks the
relevant files by asking for an ordering several times and averaging ranks,
and finally packs the top of the ranking into a token-capped context window.
Recall and compression metrics quantify how much of the needed material
survived the squeeze.
"""

from __future__ import annotations

import math
import os
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol

from patchpool import prompts
from patchpool.core import (
    ContractViolation,
    Instance,
    Role,
    TokenUsage,
    ZERO_USAGE,
)
from patchpool.llm import (
    Backend,
    BackendError,
    ChatMessage,
    ChatRequest,
    RetryPolicy,
    complete,
)

DEFAULT_CONTEXT_CAP = 128_000
DEFAULT_RANK_TARGET = 60_000
DEFAULT_SCAN_CHUNK_TOKENS = 32_000
DEFAULT_RANK_REPETITIONS = 3


class RankingFailure(Exception):
    """No ranking repetition produced a parseable ordering."""


class TokenCounter(Protocol):
    def count(self, text: str) -> int: ...


class HeuristicTokenCounter:
    """Cheap, deterministic approximation: one token per four UTF-8 bytes."""

    def count(self, text: str) -> int:
        return math.ceil(len(text.encode("utf-8")) / 4)


@dataclass(frozen=True)
class RelevanceVerdict:
    """Scan outcome for one file.

    For cleanly parsed verdicts the summary is nonempty exactly when the file
    is relevant. Two degraded forms exist: ``skipped`` files were never sent
    to the model (unreadable), and verdicts with a ``note`` came from a failed
    or unparseable exchange and are forced relevant with an empty summary so
    a needed file is never silently dropped.
    """

    file_path: str
    relevant: bool
    summary: str
    file_token_count: int
    skipped: bool = False
    note: str | None = None

    def __post_init__(self) -> None:
        if self.skipped or self.note is not None:
            return
        if bool(self.summary) != self.relevant:
            raise ContractViolation(f"summary must be nonempty iff relevant: {self.file_path}")

    def to_doc(self) -> dict[str, Any]:
        return {
            "file_path": self.file_path,
            "relevant": self.relevant,
            "summary": self.summary,
            "file_token_count": self.file_token_count,
            "skipped": self.skipped,
            "note": self.note,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "RelevanceVerdict":
        return cls(
            file_path=doc["file_path"],
            relevant=doc["relevant"],
            summary=doc["summary"],
            file_token_count=doc["file_token_count"],
            skipped=doc.get("skipped", False),
            note=doc.get("note"),
        )


@dataclass(frozen=True)
class ScanOutcome:
    verdicts: tuple[RelevanceVerdict, ...]
    usage: TokenUsage
    total_scanned_tokens: int

    def to_doc(self) -> dict[str, Any]:
        return {
            "verdicts": [v.to_doc() for v in self.verdicts],
            "usage": self.usage.to_doc(),
            "total_scanned_tokens": self.total_scanned_tokens,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "ScanOutcome":
        return cls(
            verdicts=tuple(RelevanceVerdict.from_doc(v) for v in doc["verdicts"]),
            usage=TokenUsage.from_doc(doc["usage"]),
            total_scanned_tokens=doc["total_scanned_tokens"],
        )


@dataclass(frozen=True)
class FileRank:
    path: str
    average_rank: float
    token_count: int

    def to_doc(self) -> dict[str, Any]:
        return {"path": self.path, "average_rank": self.average_rank, "token_count": self.token_count}

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "FileRank":
        return cls(doc["path"], doc["average_rank"], doc["token_count"])


@dataclass(frozen=True)
class RankingResult:
    files: tuple[FileRank, ...]
    usage: TokenUsage
    valid_repetitions: int
    total_scanned_tokens: int

    def to_doc(self) -> dict[str, Any]:
        return {
            "files": [f.to_doc() for f in self.files],
            "usage": self.usage.to_doc(),
            "valid_repetitions": self.valid_repetitions,
            "total_scanned_tokens": self.total_scanned_tokens,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "RankingResult":
        return cls(
            files=tuple(FileRank.from_doc(f) for f in doc["files"]),
            usage=TokenUsage.from_doc(doc["usage"]),
            valid_repetitions=doc["valid_repetitions"],
            total_scanned_tokens=doc["total_scanned_tokens"],
        )


@dataclass(frozen=True)
class RankedContext:
    """The assembled context window: a rank-prefix of files under a token cap."""

    files: tuple[FileRank, ...]
    included_files: tuple[str, ...]
    total_included_tokens: int
    total_scanned_tokens: int
    cap: int
    empty_due_to_cap: bool = False

    def __post_init__(self) -> None:
        if self.total_included_tokens > self.cap:
            raise ContractViolation("included tokens exceed the cap")
        prefix = tuple(f.path for f in self.files[: len(self.included_files)])
        if prefix != self.included_files:
            raise ContractViolation("included_files must be a prefix of the ranked order")

    def to_doc(self) -> dict[str, Any]:
        return {
            "kind": "ranked_context",
            "schema_version": 1,
            "files": [f.to_doc() for f in self.files],
            "included_files": list(self.included_files),
            "total_included_tokens": self.total_included_tokens,
            "total_scanned_tokens": self.total_scanned_tokens,
            "cap": self.cap,
            "empty_due_to_cap": self.empty_due_to_cap,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "RankedContext":
        return cls(
            files=tuple(FileRank.from_doc(f) for f in doc["files"]),
            included_files=tuple(doc["included_files"]),
            total_included_tokens=doc["total_included_tokens"],
            total_scanned_tokens=doc["total_scanned_tokens"],
            cap=doc["cap"],
            empty_due_to_cap=doc.get("empty_due_to_cap", False),
        )


# ---------------------------------------------------------------------------
# file discovery
# ---------------------------------------------------------------------------


def list_source_files(instance: Instance) -> list[str]:
    """All files in the snapshot admitted by the instance's filter, sorted."""
    root = Path(instance.codebase_ref)
    found: list[str] = []
    for dirpath, dirnames, filenames in os.walk(root):
        rel_dir = Path(dirpath).relative_to(root)
        # prune excluded directories so the walk skips their subtrees
        dirnames[:] = sorted(
            d for d in dirnames if d not in instance.source_file_filter.exclude_dirs
        )
        for name in filenames:
            rel = str((rel_dir / name).as_posix()) if str(rel_dir) != "." else name
            if instance.source_file_filter.admits(rel):
                found.append(rel)
    return sorted(found)


# ---------------------------------------------------------------------------
# relevance scan
# ---------------------------------------------------------------------------


def _chunk_lines(text: str, counter: TokenCounter, chunk_tokens: int) -> list[str]:
    """Split text at line boundaries into pieces of at most chunk_tokens.

    A single line over the budget is hard-split by characters so the cap
    holds even for pathological files.
    """
    if counter.count(text) <= chunk_tokens:
        return [text]
    chunks: list[str] = []
    current: list[str] = []
    current_tokens = 0
    for line in text.splitlines(keepends=True):
        line_tokens = counter.count(line)
        if line_tokens > chunk_tokens:
            if current:
                chunks.append("".join(current))
                current, current_tokens = [], 0
            step = max(1, chunk_tokens * 4)
            for i in range(0, len(line), step):
                chunks.append(line[i : i + step])
            continue
        if current and current_tokens + line_tokens > chunk_tokens:
            chunks.append("".join(current))
            current, current_tokens = [], 0
        current.append(line)
        current_tokens += line_tokens
    if current:
        chunks.append("".join(current))
    return chunks


def _parse_relevance_reply(text: str) -> tuple[bool, str] | None:
    """Returns (relevant, summary), or None when the reply is unusable."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        return None
    head = lines[0].upper()
    if head.startswith("IRRELEVANT"):
        return (False, "")
    if not head.startswith("RELEVANT"):
        return None
    summary = ""
    for ln in lines[1:]:
        if ln.upper().startswith("SUMMARY:"):
            summary = ln[len("SUMMARY:") :].strip()
            break
    # declared relevant: the file must come with a usable summary
    if not summary:
        return None
    return (True, summary)


def scan_relevance(
    instance: Instance,
    backend: Backend,
    counter: TokenCounter | None = None,
    chunk_tokens: int = DEFAULT_SCAN_CHUNK_TOKENS,
    max_workers: int = 8,
    retry: RetryPolicy = RetryPolicy(),
    sleep=None,
) -> ScanOutcome:
    """Ask the model about every admitted file; one verdict per file.

    Oversized files are scanned in line-boundary chunks and count as relevant
    if any chunk does (summary from the first relevant chunk). A backend
    failure or an unusable reply marks the file relevant with an empty
    summary: for recall, losing a needed file is strictly worse than
    carrying an extra one.
    """
    counter = counter or HeuristicTokenCounter()
    files = list_source_files(instance)
    if not files:
        return ScanOutcome(verdicts=(), usage=ZERO_USAGE, total_scanned_tokens=0)

    sleep_fn = sleep if sleep is not None else (lambda s: None)

    def scan_one(rel: str) -> tuple[RelevanceVerdict, TokenUsage]:
        full = Path(instance.codebase_ref) / rel
        try:
            content = full.read_text(encoding="utf-8", errors="replace")
        except OSError as exc:
            verdict = RelevanceVerdict(rel, False, "", 0, skipped=True, note=f"unreadable: {exc}")
            return verdict, ZERO_USAGE

        tokens = counter.count(content)
        chunks = _chunk_lines(content, counter, chunk_tokens)
        usage = ZERO_USAGE
        relevant = False
        summary = ""
        note: str | None = None
        for ci, chunk in enumerate(chunks):
            chunk_attr = f' chunk="{ci + 1}/{len(chunks)}"' if len(chunks) > 1 else ""
            prompt = prompts.render(
                "relevance",
                issue=instance.issue_text,
                file_path=rel,
                chunk_attr=chunk_attr,
                content=chunk,
            )
            request = ChatRequest(messages=(ChatMessage(Role.USER, prompt),))
            try:
                completion = complete(request, backend, retry=retry, sleep=sleep_fn)
            except BackendError as exc:
                note = f"backend failure: {exc}"
                relevant = True
                summary = ""
                break
            usage = usage + completion.usage
            parsed = _parse_relevance_reply(completion.text)
            if parsed is None:
                note = "unusable relevance reply"
                relevant = True
                summary = ""
                break
            chunk_relevant, chunk_summary = parsed
            if chunk_relevant and not relevant:
                relevant = True
                summary = chunk_summary
        verdict = RelevanceVerdict(rel, relevant, summary, tokens, note=note)
        return verdict, usage

    if max_workers > 1 and len(files) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(scan_one, files))
    else:
        results = [scan_one(f) for f in files]

    verdicts = tuple(sorted((v for v, _ in results), key=lambda v: v.file_path))
    usage = ZERO_USAGE
    for _, u in results:
        usage = usage + u
    scanned = sum(v.file_token_count for v in verdicts if not v.skipped)
    return ScanOutcome(verdicts=verdicts, usage=usage, total_scanned_tokens=scanned)


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------


def _parse_ranking_reply(text: str, known: set[str]) -> list[str]:
    """Extract an ordered list of known paths, first mention wins."""
    ordered: list[str] = []
    seen: set[str] = set()
    for raw in text.splitlines():
        line = raw.strip().strip("`'\"")
        if line not in known:
            # tolerate "1. path", "2) path", "- path" style decorations, but
            # only when the undecorated line itself is not a known path
            for prefix_end in range(len(line)):
                ch = line[prefix_end]
                if not (ch.isdigit() or ch in ".)-* \t"):
                    line = line[prefix_end:]
                    break
            else:
                line = ""
            line = line.strip().strip("`'\"")
        if line in known and line not in seen:
            ordered.append(line)
            seen.add(line)
    return ordered


def _ranking_listing(relevant: Sequence[RelevanceVerdict]) -> str:
    lines = []
    for v in relevant:
        lines.append(f"{v.file_path} ({v.file_token_count} tokens): {v.summary or '(no summary)'}")
    return "\n".join(lines)


def rank_files(
    scan: ScanOutcome,
    backend: Backend | Sequence[Backend],
    issue_text: str,
    repetitions: int = DEFAULT_RANK_REPETITIONS,
    target_tokens: int = DEFAULT_RANK_TARGET,
    retry: RetryPolicy = RetryPolicy(),
    sleep=None,
) -> RankingResult:
    """Order the relevant files by mean rank over repeated model orderings.

    Each repetition is an independent conversation over a canonical
    (lexicographic) listing of the relevant files, so supplying verdicts in a
    different order cannot change the outcome. A file a repetition omits is
    assigned rank (listed_count + 1) in that repetition. An unparseable reply
    gets exactly one in-conversation correction; if still unparseable the
    repetition is dropped. Passing one backend runs repetitions sequentially
    against it; passing a sequence runs repetition i against backends[i].
    """
    relevant = sorted(
        (v for v in scan.verdicts if v.relevant and not v.skipped), key=lambda v: v.file_path
    )
    if not relevant:
        raise ContractViolation("rank_files requires at least one relevant verdict")
    if repetitions < 1:
        raise ContractViolation("repetitions must be at least 1")

    known = {v.file_path for v in relevant}
    by_path = {v.file_path: v for v in relevant}

    if len(relevant) == 1:
        only = relevant[0]
        return RankingResult(
            files=(FileRank(only.file_path, 1.0, only.file_token_count),),
            usage=ZERO_USAGE,
            valid_repetitions=repetitions,
            total_scanned_tokens=scan.total_scanned_tokens,
        )

    backends: list[Backend]
    if isinstance(backend, Sequence):
        if len(backend) != repetitions:
            raise ContractViolation("need exactly one backend per repetition")
        backends = list(backend)
    else:
        backends = [backend] * repetitions

    initial = prompts.render(
        "ranking_initial",
        issue=issue_text,
        target_tokens=str(target_tokens),
        file_listing=_ranking_listing(relevant),
    )
    correction = prompts.load("ranking_correction").template
    sleep_fn = sleep if sleep is not None else (lambda s: None)

    def run_repetition(rep_backend: Backend) -> tuple[list[str] | None, TokenUsage]:
        messages = [ChatMessage(Role.USER, initial)]
        usage = ZERO_USAGE
        for attempt in range(2):
            completion = complete(
                ChatRequest(messages=tuple(messages)), rep_backend, retry=retry, sleep=sleep_fn
            )
            usage = usage + completion.usage
            order = _parse_ranking_reply(completion.text, known)
            if order:
                return order, usage
            messages.append(ChatMessage(Role.ASSISTANT, completion.text))
            messages.append(ChatMessage(Role.USER, correction))
        return None, usage

    if isinstance(backend, Sequence):
        with ThreadPoolExecutor(max_workers=repetitions) as pool:
            rep_results = list(pool.map(run_repetition, backends))
    else:
        rep_results = [run_repetition(b) for b in backends]

    usage = ZERO_USAGE
    orders: list[list[str]] = []
    for order, u in rep_results:
        usage = usage + u
        if order is not None:
            orders.append(order)
    if not orders:
        raise RankingFailure("all ranking repetitions were unparseable")

    mean_ranks: dict[str, float] = {}
    for path in known:
        ranks = []
        for order in orders:
            if path in order:
                ranks.append(order.index(path) + 1)
            else:
                ranks.append(len(order) + 1)
        mean_ranks[path] = sum(ranks) / len(ranks)

    ordered = sorted(known, key=lambda p: (mean_ranks[p], p))
    files = tuple(FileRank(p, mean_ranks[p], by_path[p].file_token_count) for p in ordered)
    return RankingResult(
        files=files,
        usage=usage,
        valid_repetitions=len(orders),
        total_scanned_tokens=scan.total_scanned_tokens,
    )


# ---------------------------------------------------------------------------
# assembly and metrics
# ---------------------------------------------------------------------------


def assemble_context(ranking: RankingResult, cap: int = DEFAULT_CONTEXT_CAP) -> RankedContext:
    """Pack ranked files into the window: walk in rank order, include while the
    running total stays within the cap, and stop at the first file that would
    overflow (no skipping ahead to smaller files)."""
    if not ranking.files:
        raise ContractViolation("assemble_context requires a nonempty ranking")
    included: list[str] = []
    total = 0
    for fr in ranking.files:
        if total + fr.token_count > cap:
            break
        included.append(fr.path)
        total += fr.token_count
    return RankedContext(
        files=ranking.files,
        included_files=tuple(included),
        total_included_tokens=total,
        total_scanned_tokens=ranking.total_scanned_tokens,
        cap=cap,
        empty_due_to_cap=not included,
    )


def compute_recall(context: RankedContext, gold_files: Sequence[str]) -> bool:
    """True iff every file the gold solution edits made it into the window."""
    if not gold_files:
        raise ContractViolation("compute_recall requires nonempty gold_files")
    return set(gold_files) <= set(context.included_files)


@dataclass(frozen=True)
class DatasetRecall:
    fraction: float
    counted: int
    excluded: int


def dataset_recall(
    pairs: Sequence[tuple[RankedContext, Sequence[str] | None]],
) -> DatasetRecall:
    """Fraction of instances with full recall; instances without gold files
    are excluded from the aggregate and counted separately."""
    counted = 0
    hits = 0
    excluded = 0
    for context, gold in pairs:
        if not gold:
            excluded += 1
            continue
        counted += 1
        if compute_recall(context, gold):
            hits += 1
    fraction = hits / counted if counted else 0.0
    return DatasetRecall(fraction=fraction, counted=counted, excluded=excluded)


def compression_factor(context: RankedContext) -> float | None:
    """Scanned-to-included token ratio; absent when nothing was included."""
    if context.total_included_tokens <= 0:
        return None
    return context.total_scanned_tokens / context.total_included_tokens


def render_included_files(instance: Instance, context: RankedContext) -> str:
    """Concatenate the included files' current contents for prompt embedding."""
    parts = []
    root = Path(instance.codebase_ref)
    for rel in context.included_files:
        content = (root / rel).read_text(encoding="utf-8", errors="replace")
        parts.append(f'<file path="{rel}">\n{content}\n</file>')
    return "\n".join(parts) if parts else "(no files included)"
