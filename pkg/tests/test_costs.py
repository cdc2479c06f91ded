"""Cost accounting: exact-unit pricing, ledger rendering, local-inference estimates.

The full published-cost-table and throughput reproductions live in
test_acceptance.py; this file covers the per-operation contracts and the
linearity/rounding properties behind them.
"""

import threading

import pytest
from hypothesis import given, strategies as st

from patchpool.core import ContractViolation, TokenUsage
from patchpool.llm import (
    CostLedger,
    LocalComputeSpec,
    PriceTable,
    STAGE_ORDER,
    estimate_local_cost,
    render_ledger,
    usage_cost,
)
from patchpool.llm.costs import (
    format_ledger_text,
    round_units_to_cents,
    usage_cost_units,
)

DEFAULT_PRICES = PriceTable()


def test_usage_cost_million_output_tokens():
    # 1,000,000 output tokens at $15/million
    assert usage_cost(TokenUsage(output_tokens=1_000_000), DEFAULT_PRICES) == pytest.approx(15.00)


def test_usage_cost_zero_usage():
    assert usage_cost(TokenUsage(), DEFAULT_PRICES) == 0.0


def test_usage_cost_mixed_classes():
    # 2M input at $3/M + 1M cache_read at $0.3/M = 6.30
    usage = TokenUsage(input_tokens=2_000_000, cache_read_tokens=1_000_000)
    assert usage_cost(usage, DEFAULT_PRICES) == pytest.approx(6.30)


usages = st.builds(
    TokenUsage,
    input_tokens=st.integers(0, 10**9),
    output_tokens=st.integers(0, 10**9),
    cache_read_tokens=st.integers(0, 10**9),
    cache_write_tokens=st.integers(0, 10**9),
)


@given(usages, usages)
def test_cost_is_exactly_linear(a, b):
    units_a = sum(usage_cost_units(a, DEFAULT_PRICES).values())
    units_b = sum(usage_cost_units(b, DEFAULT_PRICES).values())
    units_sum = sum(usage_cost_units(a + b, DEFAULT_PRICES).values())
    assert units_sum == units_a + units_b


def test_round_units_to_cents_half_up():
    assert round_units_to_cents(0) == 0
    assert round_units_to_cents(10**10) == 1  # exactly one cent
    assert round_units_to_cents(10**10 // 2) == 1  # half a cent rounds up
    assert round_units_to_cents(10**10 // 2 - 1) == 0


def test_price_table_rejects_negative_price():
    with pytest.raises(ContractViolation):
        PriceTable(input=-1.0).units_per_token()


# ---------------------------------------------------------------------------
# ledger
# ---------------------------------------------------------------------------


def test_ledger_accumulates_per_stage():
    ledger = CostLedger()
    ledger.record("gen_edits", TokenUsage(input_tokens=10))
    ledger.record("gen_edits", TokenUsage(input_tokens=5, output_tokens=7))
    assert ledger.stage_usage("gen_edits") == TokenUsage(input_tokens=15, output_tokens=7)
    assert ledger.stage_usage("selection") == TokenUsage()


def test_ledger_is_thread_safe():
    ledger = CostLedger()

    def worker():
        for _ in range(1000):
            ledger.record("gen_tests", TokenUsage(output_tokens=1))

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert ledger.stage_usage("gen_tests").output_tokens == 8000


def test_render_ledger_row_order_and_percentages():
    ledger = CostLedger()
    # 1M output tokens in each of two stages: $15 each, 50/50 split
    ledger.record("ranking", TokenUsage(output_tokens=1_000_000))
    ledger.record("selection", TokenUsage(output_tokens=1_000_000))
    table = render_ledger(ledger, DEFAULT_PRICES)
    assert [r.stage for r in table.rows] == list(STAGE_ORDER)
    by_stage = {r.stage: r for r in table.rows}
    assert by_stage["ranking"].total_usd == pytest.approx(15.00)
    assert by_stage["ranking"].percent == pytest.approx(50.0)
    assert by_stage["relevance"].total_usd == 0.0
    assert by_stage["relevance"].percent == 0.0
    assert table.grand_total_usd == pytest.approx(30.00)


def test_render_ledger_zero_total_splits_percent_evenly():
    ledger = CostLedger()
    ledger.record("relevance", TokenUsage())
    table = render_ledger(ledger, DEFAULT_PRICES)
    # degenerate all-zero ledger: five canonical rows at an even split
    assert table.grand_total_usd == 0.0
    assert all(r.percent == 20.0 for r in table.rows)


def test_render_ledger_single_nonzero_stage_is_100_percent():
    ledger = CostLedger()
    ledger.record("gen_edits", TokenUsage(output_tokens=1_000_000))
    table = render_ledger(ledger, DEFAULT_PRICES)
    by_stage = {r.stage: r for r in table.rows}
    assert by_stage["gen_edits"].percent == 100.0


def test_render_ledger_folds_unknown_stages_into_other():
    ledger = CostLedger()
    ledger.record("gen_edits", TokenUsage(output_tokens=1_000_000))
    ledger.record("warmup", TokenUsage(output_tokens=1_000_000))
    table = render_ledger(ledger, DEFAULT_PRICES)
    assert [r.stage for r in table.rows] == list(STAGE_ORDER) + ["other"]
    assert table.rows[-1].total_usd == pytest.approx(15.00)


def test_render_ledger_includes_local_costs():
    ledger = CostLedger()
    ledger.record_local_usd("relevance", 334.02)
    table = render_ledger(ledger, DEFAULT_PRICES)
    by_stage = {r.stage: r for r in table.rows}
    assert by_stage["relevance"].local_usd == pytest.approx(334.02)
    assert by_stage["relevance"].percent == 100.0
    assert table.grand_total_usd == pytest.approx(334.02)


def test_percentages_sum_to_100_within_rounding():
    ledger = CostLedger()
    ledger.record("ranking", TokenUsage(output_tokens=123_456))
    ledger.record("gen_tests", TokenUsage(input_tokens=999_999))
    ledger.record("gen_edits", TokenUsage(cache_read_tokens=31_415_926))
    ledger.record("selection", TokenUsage(cache_write_tokens=2_718_281))
    table = render_ledger(ledger, DEFAULT_PRICES)
    assert sum(r.percent for r in table.rows) == pytest.approx(100.0, abs=0.3)


def test_ledger_merge_and_round_trip():
    a = CostLedger()
    a.record("ranking", TokenUsage(output_tokens=10))
    b = CostLedger()
    b.record("ranking", TokenUsage(output_tokens=5))
    b.record_local_usd("relevance", 1.0)
    a.merge(b)
    restored = CostLedger.from_doc(a.to_doc())
    assert restored.stage_usage("ranking").output_tokens == 15
    assert restored.stage_local_units("relevance") == a.stage_local_units("relevance")


def test_format_ledger_text_is_deterministic():
    ledger = CostLedger()
    ledger.record("gen_tests", TokenUsage(output_tokens=1_000_000))
    text1 = format_ledger_text(render_ledger(ledger, DEFAULT_PRICES))
    text2 = format_ledger_text(render_ledger(ledger, DEFAULT_PRICES))
    assert text1 == text2
    assert "gen_tests" in text1 and "grand total" in text1


# ---------------------------------------------------------------------------
# local-inference estimation
# ---------------------------------------------------------------------------


def test_estimate_local_cost_simple_throughput():
    # one device at 2 TFLOPS, full utilization, 1e9 params: 2e12 / 2e9 = 1000 tok/s
    est = estimate_local_cost(1, 2.0, 1.0, 1e9, 3_600_000.0, 1.0)
    assert est.tokens_per_second == pytest.approx(1000.0)
    assert est.total_hours == pytest.approx(1.0)
    assert est.total_usd == pytest.approx(1.0)


def test_estimate_local_cost_zero_tokens():
    est = estimate_local_cost(8, 362.05, 0.2, 32e9, 0.0, 8.24)
    assert est.total_hours == 0.0
    assert est.total_usd == 0.0


def test_estimate_local_cost_accepts_spec_object():
    spec = LocalComputeSpec(1, 2.0, 1.0, 1e9, 3_600_000.0, 1.0)
    assert estimate_local_cost(spec).tokens_per_second == pytest.approx(1000.0)


def test_estimate_local_cost_scale_invariance():
    base = estimate_local_cost(8, 362.05, 0.2, 32e9, 1e9, 8.24)
    doubled = estimate_local_cost(8, 362.05, 0.2, 32e9, 2e9, 8.24)
    assert doubled.total_usd == pytest.approx(2 * base.total_usd, rel=1e-12)
    assert doubled.tokens_per_second == base.tokens_per_second


def test_local_compute_spec_validation():
    with pytest.raises(ContractViolation):
        LocalComputeSpec(0, 2.0, 1.0, 1e9, 1.0, 1.0)
    with pytest.raises(ContractViolation):
        LocalComputeSpec(1, 2.0, 0.0, 1e9, 1.0, 1.0)
    with pytest.raises(ContractViolation):
        LocalComputeSpec(1, 2.0, 1.5, 1e9, 1.0, 1.0)
    with pytest.raises(ContractViolation):
        LocalComputeSpec(1, 2.0, 1.0, 1e9, -1.0, 1.0)
