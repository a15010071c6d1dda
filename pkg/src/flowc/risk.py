"""Loss and empirical risk over execution traces.

The loss of one trace is exact-match error plus an optional token-cost
penalty: ``err + cost_weight * total_cost / cost_normalizer``. Failed
traces count as full error.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .executor import ExecutionTrace
from .expr import Number, is_number


@dataclass(frozen=True)
class LossConfig:
    cost_weight: float = 0.0
    cost_normalizer: float = 1000.0

    def __post_init__(self) -> None:
        if self.cost_weight < 0:
            raise ValueError("cost_weight must be non-negative")
        if self.cost_normalizer <= 0:
            raise ValueError("cost_normalizer must be positive")


DEFAULT_LOSS = LossConfig()


def answers_match(answer: object, gold: Number) -> bool:
    """Exact numeric equality after rational normalization (90 == 90.0)."""
    if not is_number(answer):
        return False
    return Fraction(answer) == Fraction(gold)


def trace_cost(trace: ExecutionTrace) -> int:
    return sum(record.token_cost for record in trace.records)


def loss(trace: ExecutionTrace, gold: Number, config: LossConfig = DEFAULT_LOSS) -> float:
    err = 0.0 if trace.ok and answers_match(trace.final_answer, gold) else 1.0
    return err + config.cost_weight * trace_cost(trace) / config.cost_normalizer


def empirical_risk(losses: Sequence[float]) -> float:
    """Mean loss over a batch. An empty batch has no risk and is an error."""
    if len(losses) == 0:
        raise ValueError("empirical risk of an empty batch is undefined")
    return sum(losses) / len(losses)


def batch_risk(
    traces: Sequence[ExecutionTrace],
    golds: Sequence[Number],
    config: LossConfig = DEFAULT_LOSS,
) -> float:
    if len(traces) != len(golds):
        raise ValueError("traces and golds must align")
    return empirical_risk([loss(t, g, config) for t, g in zip(traces, golds)])
