"""Model access layer: chat completion transport, retry, mocks, and cost accounting."""

from patchpool.core import TokenUsage, ZERO_USAGE
from patchpool.llm.backend import (
    Backend,
    BackendError,
    BackendFailure,
    ChatCompletion,
    ChatMessage,
    ChatRequest,
    LiveBackend,
    MockBackend,
    MockBackendHub,
    MockEntry,
    PlaybookExhausted,
    RecordingBackend,
    ReplayBackend,
    RetryPolicy,
    TransportError,
    complete,
)
from patchpool.llm.costs import (
    CostLedger,
    LedgerRow,
    LedgerTable,
    LocalComputeSpec,
    LocalEstimate,
    PriceTable,
    STAGE_ORDER,
    estimate_local_cost,
    format_ledger_text,
    render_ledger,
    usage_cost,
)

__all__ = [
    "Backend",
    "BackendError",
    "BackendFailure",
    "ChatCompletion",
    "ChatMessage",
    "ChatRequest",
    "CostLedger",
    "LedgerRow",
    "LedgerTable",
    "LiveBackend",
    "LocalComputeSpec",
    "LocalEstimate",
    "MockBackend",
    "MockBackendHub",
    "MockEntry",
    "PlaybookExhausted",
    "PriceTable",
    "RecordingBackend",
    "ReplayBackend",
    "RetryPolicy",
    "STAGE_ORDER",
    "TokenUsage",
    "TransportError",
    "ZERO_USAGE",
    "complete",
    "estimate_local_cost",
    "format_ledger_text",
    "render_ledger",
    "usage_cost",
]
