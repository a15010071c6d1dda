"""Sample-size bounds for plan search over finite candidate classes.

The optimizer keeps a candidate exactly when it beats the best risk on a
training batch, so the number of tasks needed to make that comparison
trustworthy follows the classic realizable finite-class bound: with
probability at least 1 - delta, every plan whose true risk exceeds epsilon
is rejected once m >= (ln(class size) + ln(1/delta)) / epsilon.

The structural rewrites give the class size a natural parameterization:
each of the k capability slots in a plan is either kept as a model call,
compiled to a program, or wrapped in a voted replica group, so a search
over k slots ranges over 3^k plans.

All arithmetic runs on :mod:`decimal` at fixed precision; float inputs are
taken at their exact binary value. Bounds are rounded up, since a sample
size is a whole number of tasks.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_CEILING, Decimal, localcontext
from fractions import Fraction

_PRECISION = 50

RealLike = int | float | Fraction | Decimal


def _as_decimal(value: RealLike, name: str) -> Decimal:
    if isinstance(value, bool):
        raise TypeError(f"{name} must be a real number, not a bool")
    if isinstance(value, Decimal):
        return value
    if isinstance(value, (int, float)):
        return Decimal(value)
    if isinstance(value, Fraction):
        return Decimal(value.numerator) / Decimal(value.denominator)
    raise TypeError(f"{name} must be a real number, got {type(value).__name__}")


def _check_rates(epsilon: Decimal, delta: Decimal) -> None:
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")


def _check_count(value: int, name: str, minimum: int) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        raise TypeError(f"{name} must be an integer")
    if value < minimum:
        raise ValueError(f"{name} must be at least {minimum}")


def sample_bound_finite(epsilon: RealLike, delta: RealLike,
                        hypothesis_count: int) -> int:
    """Tasks needed to certify a plan from a class of the given size.

    The smallest integer m with m >= (ln(count) + ln(1/delta)) / epsilon.
    """
    _check_count(hypothesis_count, "hypothesis_count", 1)
    with localcontext() as ctx:
        ctx.prec = _PRECISION
        eps = _as_decimal(epsilon, "epsilon")
        dlt = _as_decimal(delta, "delta")
        _check_rates(eps, dlt)
        bound = (Decimal(hypothesis_count).ln() - dlt.ln()) / eps
        return int(bound.to_integral_value(rounding=ROUND_CEILING))


def hypothesis_count_ternary(subtask_types: int) -> int:
    """Size of the class searched over k capability slots: exactly 3^k.

    Each slot independently stays a model call, compiles to a program, or
    becomes a voted replica group. Arbitrary-precision, so large k is fine.
    """
    _check_count(subtask_types, "subtask_types", 0)
    return 3 ** subtask_types


def sample_bound_ternary(epsilon: RealLike, delta: RealLike,
                         subtask_types: int) -> int:
    """The finite-class bound instantiated at a 3^k ternary class.

    Defined as ``sample_bound_finite(epsilon, delta, 3**k)``, so the two
    calculators cannot drift apart.
    """
    return sample_bound_finite(
        epsilon, delta, hypothesis_count_ternary(subtask_types)
    )


@dataclass(frozen=True)
class PacQuery:
    """One bound request: rates plus exactly one way of sizing the class.

    Either ``hypothesis_count`` names the class size outright, or
    ``subtask_types`` gives the slot count k for the ternary class.
    """

    epsilon: RealLike
    delta: RealLike
    hypothesis_count: int | None = None
    subtask_types: int | None = None

    def __post_init__(self) -> None:
        given = (self.hypothesis_count is not None) + (self.subtask_types is not None)
        if given != 1:
            raise ValueError(
                "exactly one of hypothesis_count / subtask_types must be supplied"
            )
        with localcontext() as ctx:
            ctx.prec = _PRECISION
            _check_rates(_as_decimal(self.epsilon, "epsilon"),
                         _as_decimal(self.delta, "delta"))
        if self.hypothesis_count is not None:
            _check_count(self.hypothesis_count, "hypothesis_count", 1)
        if self.subtask_types is not None:
            _check_count(self.subtask_types, "subtask_types", 0)

    def class_size(self) -> int:
        if self.hypothesis_count is not None:
            return self.hypothesis_count
        return hypothesis_count_ternary(self.subtask_types)

    def sample_bound(self) -> int:
        return sample_bound_finite(self.epsilon, self.delta, self.class_size())


def ternary_table(epsilon: RealLike, delta: RealLike,
                  max_subtask_types: int) -> list[tuple[int, int, int]]:
    """Rows of (k, class size, bound) for k = 0 .. max_subtask_types."""
    _check_count(max_subtask_types, "max_subtask_types", 0)
    return [
        (k, hypothesis_count_ternary(k), sample_bound_ternary(epsilon, delta, k))
        for k in range(max_subtask_types + 1)
    ]
