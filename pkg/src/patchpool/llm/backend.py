"""Chat-completion backends: live HTTP adapter, deterministic scripted mock,
and record/replay cassettes.

Every backend exposes one method, ``send(request) -> ChatCompletion``. The
``complete`` wrapper adds retry with exponential backoff for transient
transport failures and an exchange callback for run-store recording.

The mock backend is the workhorse for tests and fixture corpora: it consumes
an ordered playbook of scripted replies, optionally dispatched by a substring
hint so concurrent callers inside one scope stay deterministic, and reports
either playbook-declared usage or usage derived from a byte-count heuristic
with write-once/read-after prompt-cache accounting.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

from patchpool.core import (
    ContractViolation,
    Role,
    TokenUsage,
    canonical_json,
    write_artifact,
)


class BackendError(Exception):
    """Base class for completion failures."""


class TransportError(BackendError):
    """Transient transport problem; the caller may retry."""


class BackendFailure(BackendError):
    """Permanent failure: bad request, exhausted retries, or replay miss."""


class PlaybookExhausted(BackendError):
    """The scripted mock ran out of (matching) playbook entries."""


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str

    def to_doc(self) -> dict[str, str]:
        return {"role": self.role.value, "content": self.content}

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "ChatMessage":
        return cls(Role(doc["role"]), doc["content"])


@dataclass(frozen=True)
class ChatRequest:
    """One chat-completion request.

    ``cache_prefix_marker`` is a boundary index into ``messages``: messages
    before it form the cacheable prefix. 0 means no prefix, len(messages)
    means the whole prompt is cacheable.
    """

    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_output_tokens: int = 8192
    cache_prefix_marker: int | None = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ContractViolation("messages must be nonempty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ContractViolation(f"temperature must be in [0, 2], got {self.temperature}")
        if self.max_output_tokens <= 0:
            raise ContractViolation("max_output_tokens must be positive")
        if self.cache_prefix_marker is not None and not 0 <= self.cache_prefix_marker <= len(self.messages):
            raise ContractViolation(
                f"cache_prefix_marker {self.cache_prefix_marker} outside message boundaries"
            )

    def to_doc(self) -> dict[str, Any]:
        return {
            "messages": [m.to_doc() for m in self.messages],
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "cache_prefix_marker": self.cache_prefix_marker,
        }


@dataclass(frozen=True)
class ChatCompletion:
    text: str
    usage: TokenUsage


class Backend(Protocol):
    def send(self, request: ChatRequest) -> ChatCompletion: ...


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 1.0
    factor: float = 2.0

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ContractViolation("max_attempts must be at least 1")


def complete(
    request: ChatRequest,
    backend: Backend,
    retry: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
    on_exchange: Callable[[ChatRequest, ChatCompletion], None] | None = None,
) -> ChatCompletion:
    """Send one request, retrying transient transport failures with backoff.

    PlaybookExhausted and BackendFailure are permanent and propagate as-is;
    TransportError is retried up to retry.max_attempts total attempts and
    then converted to BackendFailure.
    """
    last: TransportError | None = None
    for attempt in range(retry.max_attempts):
        try:
            completion = backend.send(request)
        except TransportError as exc:
            last = exc
            if attempt + 1 < retry.max_attempts:
                sleep(retry.base_delay * retry.factor**attempt)
            continue
        if on_exchange is not None:
            on_exchange(request, completion)
        return completion
    raise BackendFailure(f"retries exhausted after {retry.max_attempts} attempts") from last


# ---------------------------------------------------------------------------
# Scripted mock backend
# ---------------------------------------------------------------------------


def _heuristic_tokens(text: str) -> int:
    return math.ceil(len(text.encode("utf-8")) / 4)


@dataclass(frozen=True)
class MockEntry:
    """One scripted playbook reply.

    ``match_hint``, when set, restricts the entry to requests whose joined
    message text contains the hint; entries without a hint match anything.
    ``usage`` None means "derive usage from the request with the heuristic
    counter and cache accounting". ``delay_s`` stretches the simulated call
    so concurrency instrumentation has something to observe.
    """

    response: str
    usage: TokenUsage | None = None
    match_hint: str | None = None
    transport_error: bool = False
    delay_s: float = 0.0

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "MockEntry":
        usage_doc = doc.get("usage")
        return cls(
            response=doc.get("response", ""),
            usage=TokenUsage.from_doc(usage_doc) if usage_doc is not None else None,
            match_hint=doc.get("match_hint"),
            transport_error=bool(doc.get("transport_error", False)),
            delay_s=float(doc.get("delay_s", 0.0)),
        )

    def to_doc(self) -> dict[str, Any]:
        return {
            "response": self.response,
            "usage": self.usage.to_doc() if self.usage is not None else None,
            "match_hint": self.match_hint,
            "transport_error": self.transport_error,
            "delay_s": self.delay_s,
        }


class MockBackend:
    """Deterministic scripted backend consuming an ordered playbook.

    Dispatch picks the first unconsumed entry whose hint matches the request
    (hintless entries match anything), so concurrent callers with distinct
    hinted prompts always receive their own scripted replies regardless of
    arrival order. ``advance`` fast-forwards past entries already consumed by
    an interrupted run being resumed.
    """

    def __init__(self, entries: Sequence[MockEntry], scope: str = "", hub: "MockBackendHub | None" = None):
        self._entries = list(entries)
        self._consumed = [False] * len(self._entries)
        self._lock = threading.Lock()
        self.scope = scope
        self._hub = hub
        self.calls = 0

    def advance(self, n: int) -> None:
        """Mark the first n unconsumed entries consumed (resume fast-forward)."""
        with self._lock:
            remaining = n
            for i, done in enumerate(self._consumed):
                if remaining == 0:
                    break
                if not done:
                    self._consumed[i] = True
                    remaining -= 1
            if remaining:
                raise PlaybookExhausted(
                    f"cannot advance {n} entries in scope {self.scope!r}: playbook too short"
                )

    def remaining(self) -> int:
        with self._lock:
            return sum(1 for done in self._consumed if not done)

    def send(self, request: ChatRequest) -> ChatCompletion:
        if self._hub is not None:
            self._hub._enter()
        try:
            return self._send_inner(request)
        finally:
            if self._hub is not None:
                self._hub._exit()

    def _send_inner(self, request: ChatRequest) -> ChatCompletion:
        joined = "\n".join(m.content for m in request.messages)
        with self._lock:
            picked = None
            for i, entry in enumerate(self._entries):
                if self._consumed[i]:
                    continue
                if entry.match_hint is None or entry.match_hint in joined:
                    picked = (i, entry)
                    break
            if picked is None:
                raise PlaybookExhausted(
                    f"no unconsumed playbook entry matches request in scope {self.scope!r}"
                )
            idx, entry = picked
            self._consumed[idx] = True
            self.calls += 1
            if entry.transport_error:
                raise TransportError(f"scripted transport error (scope {self.scope!r}, entry {idx})")
            usage = entry.usage if entry.usage is not None else self._derive_usage(request, entry)
        if entry.delay_s:
            time.sleep(entry.delay_s)
        return ChatCompletion(text=entry.response, usage=usage)

    def _derive_usage(self, request: ChatRequest, entry: MockEntry) -> TokenUsage:
        # Four-class accounting without backend state, so an interrupted and
        # resumed run derives the same numbers: the conversation opener (a
        # request that is exactly the cacheable prefix) writes the cache,
        # every continuation of that prefix reads it.
        marker = request.cache_prefix_marker or 0
        prefix_text = "\n".join(m.content for m in request.messages[:marker])
        suffix_text = "\n".join(m.content for m in request.messages[marker:])
        prefix_tokens = _heuristic_tokens(prefix_text) if prefix_text else 0
        suffix_tokens = _heuristic_tokens(suffix_text) if suffix_text else 0
        cache_read = cache_write = 0
        if prefix_tokens:
            if marker == len(request.messages):
                cache_write = prefix_tokens
            else:
                cache_read = prefix_tokens
        return TokenUsage(
            input_tokens=suffix_tokens,
            output_tokens=_heuristic_tokens(entry.response),
            cache_read_tokens=cache_read,
            cache_write_tokens=cache_write,
        )


class MockBackendHub:
    """Factory of per-scope mock backends backed by playbook files.

    A playbook root directory holds one JSON file per scope (path
    ``<root>/<scope>.json``, scopes may contain slashes), each an ordered
    list of entry documents. An inline mapping of scope -> entry list works
    the same way for tests.
    """

    def __init__(self, playbooks: Path | dict[str, Sequence[MockEntry]], max_concurrency: int | None = None):
        self._root = playbooks if isinstance(playbooks, Path) else None
        self._inline = playbooks if isinstance(playbooks, dict) else None
        self._semaphore = threading.Semaphore(max_concurrency) if max_concurrency else None
        self._lock = threading.Lock()
        self._in_flight = 0
        self.max_in_flight = 0
        self.total_calls = 0

    def _enter(self) -> None:
        # Gauge first, semaphore second would over-report; acquire before
        # counting so max_in_flight reflects truly concurrent sends.
        if self._semaphore is not None:
            self._semaphore.acquire()
        with self._lock:
            self._in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self._in_flight)
            self.total_calls += 1

    def _exit(self) -> None:
        with self._lock:
            self._in_flight -= 1
        if self._semaphore is not None:
            self._semaphore.release()

    def session(self, scope: str) -> MockBackend:
        """Load the playbook for one scope as a fresh consuming backend."""
        if self._inline is not None:
            if scope not in self._inline:
                raise PlaybookExhausted(f"no playbook for scope {scope!r}")
            return MockBackend(self._inline[scope], scope=scope, hub=self)
        path = self._root / f"{scope}.json"
        if not path.is_file():
            raise PlaybookExhausted(f"no playbook file for scope {scope!r}: {path}")
        with open(path, encoding="utf-8") as fh:
            docs = json.load(fh)
        entries = [MockEntry.from_doc(d) for d in docs]
        return MockBackend(entries, scope=scope, hub=self)

    def has_scope(self, scope: str) -> bool:
        if self._inline is not None:
            return scope in self._inline
        return (self._root / f"{scope}.json").is_file()


def write_playbook(path: Path, entries: Sequence[MockEntry]) -> None:
    write_artifact(path, [e.to_doc() for e in entries])


# ---------------------------------------------------------------------------
# Live HTTP backend
# ---------------------------------------------------------------------------


def build_payload(request: ChatRequest, model: str) -> dict[str, Any]:
    """Shape a request for a message-list chat-completion HTTP API.

    System messages are hoisted into the top-level system field; the last
    message of the cacheable prefix carries an ephemeral cache-control
    annotation (the API caches everything up to and including that block).
    """
    marker = request.cache_prefix_marker or 0
    system_blocks: list[dict[str, Any]] = []
    message_list: list[dict[str, Any]] = []
    for i, msg in enumerate(request.messages):
        block: dict[str, Any] = {"type": "text", "text": msg.content}
        if marker and i == marker - 1:
            block["cache_control"] = {"type": "ephemeral"}
        if msg.role is Role.SYSTEM:
            system_blocks.append(block)
        else:
            message_list.append({"role": msg.role.value, "content": [block]})
    payload: dict[str, Any] = {
        "model": model,
        "max_tokens": request.max_output_tokens,
        "temperature": request.temperature,
        "messages": message_list,
    }
    if system_blocks:
        payload["system"] = system_blocks
    return payload


class LiveBackend:
    """Adapter for a message-list chat-completion HTTP endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str,
        auth_env_var: str = "LLM_API_KEY",
        timeout_s: float = 600.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.auth_env_var = auth_env_var
        self.timeout_s = timeout_s

    def send(self, request: ChatRequest) -> ChatCompletion:
        import requests

        api_key = os.environ.get(self.auth_env_var, "")
        if not api_key:
            raise BackendFailure(f"auth token env var {self.auth_env_var} is not set")
        payload = build_payload(request, self.model)
        try:
            resp = requests.post(
                f"{self.base_url}/v1/messages",
                headers={
                    "x-api-key": api_key,
                    "anthropic-version": "2023-06-01",
                    "content-type": "application/json",
                },
                json=payload,
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:500]}")
        if resp.status_code >= 400:
            raise BackendFailure(f"HTTP {resp.status_code}: {resp.text[:500]}")
        body = resp.json()
        text = "".join(
            block.get("text", "") for block in body.get("content", []) if block.get("type") == "text"
        )
        usage_doc = body.get("usage", {})
        usage = TokenUsage(
            input_tokens=int(usage_doc.get("input_tokens", 0)),
            output_tokens=int(usage_doc.get("output_tokens", 0)),
            cache_read_tokens=int(usage_doc.get("cache_read_input_tokens", 0)),
            cache_write_tokens=int(usage_doc.get("cache_creation_input_tokens", 0)),
        )
        return ChatCompletion(text=text, usage=usage)


# ---------------------------------------------------------------------------
# Record / replay cassettes
# ---------------------------------------------------------------------------


def request_digest(request: ChatRequest) -> str:
    return hashlib.sha256(canonical_json(request.to_doc()).encode("utf-8")).hexdigest()


class RecordingBackend:
    """Pass-through backend persisting every exchange as a replayable cassette."""

    def __init__(self, inner: Backend, cassette_dir: Path):
        self.inner = inner
        self.cassette_dir = Path(cassette_dir)

    def send(self, request: ChatRequest) -> ChatCompletion:
        completion = self.inner.send(request)
        digest = request_digest(request)
        write_artifact(
            self.cassette_dir / f"{digest}.json",
            {
                "request": request.to_doc(),
                "response": completion.text,
                "usage": completion.usage.to_doc(),
            },
        )
        return completion


class ReplayBackend:
    """Backend answering exclusively from recorded cassettes."""

    def __init__(self, cassette_dir: Path):
        self.cassette_dir = Path(cassette_dir)

    def send(self, request: ChatRequest) -> ChatCompletion:
        path = self.cassette_dir / f"{request_digest(request)}.json"
        if not path.is_file():
            raise BackendFailure(f"no cassette recorded for request digest {path.stem}")
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return ChatCompletion(text=doc["response"], usage=TokenUsage.from_doc(doc["usage"]))
