"""API cost accounting and local-inference cost estimation.

Money is tracked in exact integer units so that cost is exactly linear in
token counts: one unit is 1e-12 USD, i.e. a price quoted in USD per million
tokens becomes an integer number of units per token (price * 1e6). Floats
appear only at the display boundary, where totals are rounded half-up to
whole cents.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

from patchpool.core import ContractViolation, TokenUsage, ZERO_USAGE

# integer money: 1 unit = 1e-12 USD; USD-per-million-token prices convert to
# exact integer units per token
UNITS_PER_USD = 10**12
_CENT_UNITS = 10**10

#: canonical pipeline stages, in report order
STAGE_ORDER = ("relevance", "ranking", "gen_tests", "gen_edits", "selection")
OTHER_STAGE = "other"

USAGE_CLASSES = ("input", "output", "cache_read", "cache_write")


def _price_units(usd_per_million: float) -> int:
    if usd_per_million < 0:
        raise ContractViolation("prices must be nonnegative")
    return round(usd_per_million * 1_000_000)


@dataclass(frozen=True)
class PriceTable:
    """Per-class token prices in USD per million tokens."""

    input: float = 3.00
    output: float = 15.00
    cache_read: float = 0.30
    cache_write: float = 3.75

    def units_per_token(self) -> dict[str, int]:
        return {
            "input": _price_units(self.input),
            "output": _price_units(self.output),
            "cache_read": _price_units(self.cache_read),
            "cache_write": _price_units(self.cache_write),
        }

    def to_doc(self) -> dict[str, float]:
        return {
            "input": self.input,
            "output": self.output,
            "cache_read": self.cache_read,
            "cache_write": self.cache_write,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, float]) -> "PriceTable":
        return cls(
            input=doc.get("input", 3.00),
            output=doc.get("output", 15.00),
            cache_read=doc.get("cache_read", 0.30),
            cache_write=doc.get("cache_write", 3.75),
        )


def usage_cost_units(usage: TokenUsage, prices: PriceTable) -> dict[str, int]:
    """Exact cost of one usage record, per class, in integer units."""
    per_token = prices.units_per_token()
    return {
        "input": usage.input_tokens * per_token["input"],
        "output": usage.output_tokens * per_token["output"],
        "cache_read": usage.cache_read_tokens * per_token["cache_read"],
        "cache_write": usage.cache_write_tokens * per_token["cache_write"],
    }


def usage_cost(usage: TokenUsage, prices: PriceTable) -> float:
    """Cost of one usage record in USD (exact units divided out at the end)."""
    return sum(usage_cost_units(usage, prices).values()) / UNITS_PER_USD


def units_to_usd(units: int) -> float:
    return units / UNITS_PER_USD


def round_units_to_cents(units: int) -> int:
    """Round integer cost units to whole cents, half-up."""
    return (units + _CENT_UNITS // 2) // _CENT_UNITS


def usd_to_units(usd: float) -> int:
    """Convert a display dollar amount to exact units (used by local costs)."""
    return round(usd * UNITS_PER_USD)


class CostLedger:
    """Thread-safe accumulator of token usage and local compute cost per stage.

    API usage is recorded as token counts and priced at render time; local
    (self-hosted) compute is recorded directly as cost units because it is
    estimated from hardware time, not tokens.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._usage: dict[str, TokenUsage] = {}
        self._local_units: dict[str, int] = {}

    def record(self, stage: str, usage: TokenUsage) -> None:
        if not stage:
            raise ContractViolation("stage must be nonempty")
        with self._lock:
            self._usage[stage] = self._usage.get(stage, ZERO_USAGE) + usage

    def record_local_units(self, stage: str, units: int) -> None:
        if not stage:
            raise ContractViolation("stage must be nonempty")
        if units < 0:
            raise ContractViolation("local cost units must be nonnegative")
        with self._lock:
            self._local_units[stage] = self._local_units.get(stage, 0) + units

    def record_local_usd(self, stage: str, usd: float) -> None:
        self.record_local_units(stage, usd_to_units(usd))

    def stage_usage(self, stage: str) -> TokenUsage:
        with self._lock:
            return self._usage.get(stage, ZERO_USAGE)

    def stage_local_units(self, stage: str) -> int:
        with self._lock:
            return self._local_units.get(stage, 0)

    def snapshot(self) -> tuple[dict[str, TokenUsage], dict[str, int]]:
        with self._lock:
            return dict(self._usage), dict(self._local_units)

    def merge(self, other: "CostLedger") -> None:
        usage, local = other.snapshot()
        for stage, u in usage.items():
            self.record(stage, u)
        for stage, units in local.items():
            self.record_local_units(stage, units)

    def to_doc(self) -> dict[str, object]:
        usage, local = self.snapshot()
        return {
            "kind": "cost_ledger",
            "schema_version": 1,
            "usage": {stage: u.to_doc() for stage, u in sorted(usage.items())},
            "local_units": {stage: units for stage, units in sorted(local.items())},
        }

    @classmethod
    def from_doc(cls, doc: dict[str, object]) -> "CostLedger":
        ledger = cls()
        for stage, u in doc.get("usage", {}).items():  # type: ignore[union-attr]
            ledger.record(stage, TokenUsage.from_doc(u))
        for stage, units in doc.get("local_units", {}).items():  # type: ignore[union-attr]
            ledger.record_local_units(stage, int(units))
        return ledger


@dataclass(frozen=True)
class LedgerRow:
    """One stage of the rendered cost table; dollar figures are display floats."""

    stage: str
    input_usd: float
    output_usd: float
    cache_read_usd: float
    cache_write_usd: float
    local_usd: float
    total_usd: float
    percent: float


@dataclass(frozen=True)
class LedgerTable:
    rows: tuple[LedgerRow, ...]
    grand_total_usd: float


def _cents(units: int) -> float:
    return round_units_to_cents(units) / 100.0


def render_ledger(ledger: CostLedger, prices: PriceTable) -> LedgerTable:
    """Price the ledger into a per-stage cost table with total percentages.

    Stages appear in canonical order; usage recorded under any other stage
    name is folded into a trailing "other" row (present only when nonzero).
    Percentages are computed from exact units and rounded to 0.1; when the
    grand total is zero every row gets an equal share.
    """
    usage, local = ledger.snapshot()

    known = set(STAGE_ORDER)
    extra_usage = ZERO_USAGE
    extra_local = 0
    for stage, u in usage.items():
        if stage not in known:
            extra_usage = extra_usage + u
    for stage, units in local.items():
        if stage not in known:
            extra_local += units

    raw_rows: list[tuple[str, TokenUsage, int]] = [
        (stage, usage.get(stage, ZERO_USAGE), local.get(stage, 0)) for stage in STAGE_ORDER
    ]
    has_extra = (extra_usage != ZERO_USAGE) or extra_local != 0
    if has_extra:
        raw_rows.append((OTHER_STAGE, extra_usage, extra_local))

    per_stage_units: list[dict[str, int]] = []
    for _, u, local_units in raw_rows:
        class_units = usage_cost_units(u, prices)
        class_units["local"] = local_units
        class_units["total"] = sum(class_units.values())
        per_stage_units.append(class_units)

    grand_units = sum(row["total"] for row in per_stage_units)

    rows: list[LedgerRow] = []
    for (stage, _, _), cu in zip(raw_rows, per_stage_units):
        if grand_units > 0:
            percent = round(100.0 * cu["total"] / grand_units, 1)
        else:
            percent = round(100.0 / len(raw_rows), 1)
        rows.append(
            LedgerRow(
                stage=stage,
                input_usd=_cents(cu["input"]),
                output_usd=_cents(cu["output"]),
                cache_read_usd=_cents(cu["cache_read"]),
                cache_write_usd=_cents(cu["cache_write"]),
                local_usd=_cents(cu["local"]),
                total_usd=_cents(cu["total"]),
                percent=percent,
            )
        )
    return LedgerTable(rows=tuple(rows), grand_total_usd=_cents(grand_units))


def format_ledger_text(table: LedgerTable) -> str:
    """Fixed-width text rendering of a cost table (deterministic output)."""
    headers = ("stage", "input", "output", "cache_read", "cache_write", "local", "total", "%")
    lines = ["  ".join(f"{h:>12}" for h in headers)]
    for row in table.rows:
        cells = (
            row.stage,
            f"{row.input_usd:.2f}",
            f"{row.output_usd:.2f}",
            f"{row.cache_read_usd:.2f}",
            f"{row.cache_write_usd:.2f}",
            f"{row.local_usd:.2f}",
            f"{row.total_usd:.2f}",
            f"{row.percent:.1f}",
        )
        lines.append("  ".join(f"{c:>12}" for c in cells))
    lines.append(f"{'grand total':>12}  {table.grand_total_usd:.2f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Local (self-hosted) inference cost estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LocalComputeSpec:
    """Hardware and workload description for a self-hosted inference run.

    Throughput model: each processed token costs 2 * model_params FLOPs, the
    fleet delivers device_count * peak_tflops_per_device * 1e12 FLOP/s at the
    given utilization, and the whole fleet bills at usd_per_hour.
    """

    device_count: int
    peak_tflops_per_device: float
    utilization: float
    model_params: float
    total_tokens: float
    usd_per_hour: float

    def __post_init__(self) -> None:
        if self.device_count <= 0:
            raise ContractViolation("device_count must be positive")
        for name in ("peak_tflops_per_device", "utilization", "model_params", "usd_per_hour"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if self.utilization > 1:
            raise ContractViolation("utilization must be in (0, 1]")
        # zero tokens is a legal degenerate workload (costs nothing)
        if self.total_tokens < 0:
            raise ContractViolation("total_tokens must be nonnegative")


@dataclass(frozen=True)
class LocalEstimate:
    tokens_per_second: float
    total_hours: float
    total_usd: float


def estimate_local_cost(
    spec_or_device_count: LocalComputeSpec | int,
    per_device_tflops: float | None = None,
    utilization: float | None = None,
    param_count: float | None = None,
    total_tokens: float | None = None,
    usd_per_hour: float | None = None,
) -> LocalEstimate:
    """Estimate throughput, wall time, and dollar cost of a local inference job.

    Accepts either a LocalComputeSpec or the six spec fields positionally
    (device_count, per_device_tflops, utilization, param_count, total_tokens,
    usd_per_hour).
    """
    if isinstance(spec_or_device_count, LocalComputeSpec):
        spec = spec_or_device_count
    else:
        if None in (per_device_tflops, utilization, param_count, total_tokens, usd_per_hour):
            raise ContractViolation("all six spec fields are required in positional form")
        spec = LocalComputeSpec(
            device_count=spec_or_device_count,
            peak_tflops_per_device=per_device_tflops,
            utilization=utilization,
            model_params=param_count,
            total_tokens=total_tokens,
            usd_per_hour=usd_per_hour,
        )
    flops_per_second = spec.utilization * spec.device_count * spec.peak_tflops_per_device * 1e12
    flops_per_token = 2.0 * spec.model_params
    tokens_per_second = flops_per_second / flops_per_token
    total_hours = spec.total_tokens / tokens_per_second / 3600.0
    total_usd = total_hours * spec.usd_per_hour
    return LocalEstimate(
        tokens_per_second=tokens_per_second,
        total_hours=total_hours,
        total_usd=total_usd,
    )
