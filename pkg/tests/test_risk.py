"""Loss and empirical risk arithmetic."""

from __future__ import annotations

from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowc.executor import ExecutionTrace, NodeRecord, TraceStatus
from flowc.risk import LossConfig, answers_match, batch_risk, empirical_risk, loss, trace_cost


def make_trace(answer, cost: int = 0, ok: bool = True) -> ExecutionTrace:
    record = NodeRecord(node_id="n", inputs={}, raw_output=str(answer),
                        parsed_output=answer, token_cost=cost, wall_time=0.0)
    if ok:
        return ExecutionTrace(task_id="t", records=(record,),
                              final_answer=answer, status=TraceStatus.OK)
    return ExecutionTrace(task_id="t", records=(record,), final_answer=None,
                          status=TraceStatus.NODE_ERROR,
                          error_node="n", error_reason="boom")


def test_exact_match_after_rational_normalization():
    assert answers_match(90, 90)
    assert answers_match(Fraction(90), 90)
    assert answers_match(Fraction(181, 2), Fraction(181, 2))
    assert not answers_match(Fraction(181, 2), 90)
    assert not answers_match("90", 90)
    assert not answers_match(None, 90)


def test_loss_zero_for_correct_trace_without_cost_weight():
    assert loss(make_trace(90), 90) == 0.0


def test_loss_one_for_wrong_answer_and_for_failures():
    assert loss(make_trace(89), 90) == 1.0
    assert loss(make_trace(None, ok=False), 90) == 1.0


def test_cost_term_example():
    config = LossConfig(cost_weight=0.1, cost_normalizer=1000.0)
    trace = make_trace(90, cost=200)
    assert loss(trace, 90, config) == pytest.approx(0.02)


def test_trace_cost_sums_records():
    records = tuple(
        NodeRecord(node_id=f"n{i}", inputs={}, raw_output="", parsed_output="",
                   token_cost=c, wall_time=0.0)
        for i, c in enumerate((3, 4, 0))
    )
    trace = ExecutionTrace(task_id="t", records=records, final_answer=1,
                           status=TraceStatus.OK)
    assert trace_cost(trace) == 7


def test_empirical_risk_examples():
    assert empirical_risk([0.0, 0.0, 1.0]) == pytest.approx(1 / 3)
    assert empirical_risk([0.02, 1.0]) == pytest.approx(0.51)
    with pytest.raises(ValueError):
        empirical_risk([])


def test_batch_risk_aligns_traces_and_golds():
    traces = [make_trace(90), make_trace(10), make_trace(None, ok=False)]
    assert batch_risk(traces, [90, 90, 90]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        batch_risk(traces, [90])


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(cost_weight=-0.1)
    with pytest.raises(ValueError):
        LossConfig(cost_normalizer=0)


@given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=50))
def test_empirical_risk_stays_within_loss_bounds(losses):
    value = empirical_risk(losses)
    assert min(losses) - 1e-12 <= value <= max(losses) + 1e-12


@given(st.integers(min_value=0, max_value=10_000))
def test_loss_monotone_in_cost(cost):
    config = LossConfig(cost_weight=0.5, cost_normalizer=250.0)
    base = loss(make_trace(90, cost=cost), 90, config)
    more = loss(make_trace(90, cost=cost + 17), 90, config)
    assert more > base
