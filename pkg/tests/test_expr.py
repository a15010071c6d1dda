"""Expression language: conformance cases, typed errors, and a
differential check against an independent reference evaluator."""

from __future__ import annotations

import random
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowc import expr
from flowc.expr import (
    Binary,
    Call,
    ExprEvalError,
    ExprSyntaxError,
    ExtractionError,
    Field,
    Index,
    Lit,
    ListExpr,
    Name,
    Unary,
    compile_program,
    eval_program,
    extract_answer,
    find_numbers,
    free_names,
    majority_vote,
    unparse,
)

# --------------------------------------------------------------------------
# extract_answer


def test_extract_takes_first_number_after_last_marker():
    text = "P - 80 = 10, so P = 90.\n#### Item Costs: 80\n#### Change Received: 10"
    assert extract_answer(text) == 10


def test_extract_marker_scans_to_end_of_text():
    assert extract_answer("#### answer\nis 7 not 9") == 7


def test_extract_final_number_without_marker():
    assert extract_answer("Money given = 80 + 10 = 90") == 90
    assert extract_answer("12 then 15 then 3") == 3


def test_extract_three_hash_headings_are_not_markers():
    text = "### Step 1: 55 + 25 = 80\n### Step 2: 80 + 10 = 90\n### Step 3: 90 + 10 = 100"
    assert extract_answer(text) == 100


def test_extract_single_marker():
    assert extract_answer("reasoning 1 2 3\n#### 42") == 42


def test_extract_strips_commas_and_currency():
    assert extract_answer("#### $1,234") == 1234
    assert extract_answer("the price was $80 total") == 80
    assert extract_answer("total is $1,234.50") == Fraction(246_900, 200)


def test_extract_signed_and_decimal():
    assert extract_answer("delta was -5") == -5
    assert extract_answer("#### -12.5") == Fraction(-25, 2)


def test_extract_decimal_normalizes_to_integer():
    assert extract_answer("x = 90.0") == 90
    assert isinstance(extract_answer("x = 90.0"), int)


def test_extract_no_number_raises():
    with pytest.raises(ExtractionError):
        extract_answer("no digits here")
    # numbers before the last marker do not count
    with pytest.raises(ExtractionError):
        extract_answer("80 and 10\n#### nothing after")


def test_extract_rejects_non_text():
    with pytest.raises(ExprEvalError):
        extract_answer(90)  # type: ignore[arg-type]


@given(st.integers(min_value=-10**9, max_value=10**9))
def test_extract_marker_roundtrip(n):
    assert extract_answer(f"some words 1 2 3\n#### {n}") == n


# --------------------------------------------------------------------------
# majority_vote


def test_vote_strict_majority():
    assert majority_vote([90, 90, 100]) == 90
    assert majority_vote([90, 90, 90]) == 90
    assert majority_vote([1]) == 1


def test_vote_no_majority_returns_minimum():
    assert majority_vote([100, 10, 90]) == 10
    assert majority_vote([5, 7]) == 5
    assert majority_vote([3, 1, 2, 1, 3]) == 1


def test_vote_counts_int_and_fraction_as_equal():
    assert majority_vote([90, Fraction(90), 100]) == 90


def test_vote_rejects_empty_and_non_numbers():
    with pytest.raises(ExprEvalError):
        majority_vote([])
    with pytest.raises(ExprEvalError):
        majority_vote(["90", 90, 90])


@given(st.lists(st.integers(min_value=-50, max_value=50), min_size=1, max_size=9),
       st.randoms(use_true_random=False))
def test_vote_is_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert majority_vote(list(values)) == majority_vote(shuffled)


# --------------------------------------------------------------------------
# evaluation


def test_eval_sum_of_bindings():
    assert eval_program("a + b + c", {"a": 55, "b": 25, "c": 10}) == 90


def test_eval_exact_division_and_normalization():
    assert eval_program("1 / 3") == Fraction(1, 3)
    assert eval_program("4 / 2") == 2
    assert isinstance(eval_program("4 / 2"), int)
    assert eval_program("90 == 90.0") == 1


def test_eval_precedence_and_power():
    assert eval_program("2 + 3 * 4") == 14
    assert eval_program("2 ^ 10") == 1024
    assert eval_program("2 ^ 3 ^ 2") == 512  # right-assoc
    assert eval_program("-2 ^ 2") == 4  # unary binds tighter than ^
    assert eval_program("10 % 3") == 1


def test_eval_128_bit_chains_are_exact():
    assert eval_program("x * x", {"x": 10**18}) == 10**36
    assert eval_program("(10 ^ 20) * (10 ^ 18) + 1") == 10**38 + 1


def test_eval_typed_errors():
    with pytest.raises(ExprEvalError, match="division by zero"):
        eval_program("1 / (2 - 2)")
    with pytest.raises(ExprEvalError, match="modulo by zero"):
        eval_program("1 % 0")
    with pytest.raises(ExprEvalError, match="unbound name"):
        eval_program("q + 1")
    with pytest.raises(ExprEvalError, match="expects numbers"):
        eval_program('1 + "a"')
    with pytest.raises(ExprEvalError, match="overflow"):
        eval_program("2 ^ 65")
    with pytest.raises(ExprEvalError, match="overflow"):
        eval_program("(2 ^ 64) ^ 64")
    with pytest.raises(ExprEvalError, match="integer"):
        eval_program("2 ^ (1 / 2)")


def test_eval_json_access():
    doc = '{"a": 55, "b": 25, "nested": {"c": 10}, "xs": [1, 2, 3]}'
    env = {"doc": doc}
    assert eval_program("parse_json(doc).a + parse_json(doc).b", env) == 80
    assert eval_program("parse_json(doc).nested.c", env) == 10
    assert eval_program("parse_json(doc).xs[1]", env) == 2
    assert eval_program('parse_json(doc)["a"]', env) == 55
    with pytest.raises(ExprEvalError, match="unknown field"):
        eval_program("parse_json(doc).missing", env)
    with pytest.raises(ExprEvalError, match="out of range"):
        eval_program("parse_json(doc).xs[9]", env)
    with pytest.raises(ExprEvalError, match="malformed json"):
        eval_program("parse_json(t)", {"t": "{not json"})


def test_eval_json_decimals_stay_exact():
    assert eval_program("parse_json(t).x", {"t": '{"x": 0.1}'}) == Fraction(1, 10)


def test_eval_text_operations():
    assert eval_program('"a" + "b"') == "ab"
    assert eval_program("text(90)") == "90"
    assert eval_program('text(x) + "\\n" + text(y)', {"x": 1, "y": 2}) == "1\n2"
    assert eval_program("numbers(t)", {"t": "3 cats ate 4 fish"}) == [3, 4]


def test_eval_builtin_primitives_compose():
    env = {"r1": "the answer is 90", "r2": "#### 90", "r3": "I claim 100"}
    program = "majority_vote([extract_answer(r1), extract_answer(r2), extract_answer(r3)])"
    assert eval_program(program, env) == 90


def test_eval_comparisons():
    assert eval_program("3 < 4") == 1
    assert eval_program("3 >= 4") == 0
    assert eval_program('"abc" < "abd"') == 1
    assert eval_program("1 == 1.0") == 1
    assert eval_program('"1" == 1') == 0
    with pytest.raises(ExprEvalError):
        eval_program('1 < "a"')


def test_eval_unknown_function_and_arity():
    with pytest.raises(ExprEvalError, match="unknown function"):
        eval_program("launch(1)")
    with pytest.raises(ExprEvalError, match="argument"):
        eval_program("extract_answer()")


def test_eval_is_deterministic():
    program = compile_program("(a * 3 + 1) / (b - 2)")
    env = {"a": 7, "b": 9}
    results = {eval_program(program, env) for _ in range(100)}
    assert results == {Fraction(22, 7)}


# --------------------------------------------------------------------------
# parsing


def test_syntax_errors_carry_positions():
    with pytest.raises(ExprSyntaxError) as info:
        compile_program("1 + ")
    assert info.value.position == 4
    with pytest.raises(ExprSyntaxError):
        compile_program("")
    with pytest.raises(ExprSyntaxError, match="trailing"):
        compile_program("1 2")
    with pytest.raises(ExprSyntaxError, match="unexpected character"):
        compile_program("1 + #")
    with pytest.raises(ExprSyntaxError, match="escape"):
        compile_program('"bad \\q"')
    with pytest.raises(ExprSyntaxError, match="deeply"):
        compile_program("(" * 300 + "1" + ")" * 300)


def test_free_names():
    program = compile_program("parse_json(doc).a + x[i] - task")
    assert free_names(program) == {"doc", "x", "i", "task"}


def test_unparse_round_trips():
    sources = [
        "a + b + c",
        "majority_vote([extract_answer(r1), extract_answer(r2)])",
        '(a - -3) * 2 ^ k',
        'parse_json(doc).items[0].price',
        '"a\\nb" + text(1 / 3)',
        "x == y",
    ]
    for source in sources:
        program = compile_program(source)
        again = compile_program(unparse(program.ast))
        assert again.ast == program.ast, source


# --------------------------------------------------------------------------
# differential oracle: independent naive reference evaluator

_ERR = object()


def _ref_eval(node, env):
    """Reference semantics, implemented separately from the production
    evaluator: plain recursion, Fraction arithmetic, fail-fast errors."""
    if isinstance(node, Lit):
        return node.value
    if isinstance(node, Name):
        if node.ident not in env:
            raise ExprEvalError("unbound")
        return env[node.ident]
    if isinstance(node, ListExpr):
        return [_ref_eval(x, env) for x in node.items]
    if isinstance(node, Unary):
        value = _ref_eval(node.operand, env)
        if isinstance(value, bool) or not isinstance(value, (int, Fraction)):
            raise ExprEvalError("type")
        out = -Fraction(value)
        return int(out) if out.denominator == 1 else out
    if isinstance(node, Binary):
        lhs = _ref_eval(node.left, env)
        rhs = _ref_eval(node.right, env)
        if node.op in ("==", "!=", "<", "<=", ">", ">="):
            if isinstance(lhs, (int, Fraction)) and isinstance(rhs, (int, Fraction)):
                table = {
                    "==": lhs == rhs, "!=": lhs != rhs, "<": lhs < rhs,
                    "<=": lhs <= rhs, ">": lhs > rhs, ">=": lhs >= rhs,
                }
                return int(table[node.op])
            if isinstance(lhs, str) and isinstance(rhs, str):
                table = {
                    "==": lhs == rhs, "!=": lhs != rhs, "<": lhs < rhs,
                    "<=": lhs <= rhs, ">": lhs > rhs, ">=": lhs >= rhs,
                }
                return int(table[node.op])
            if node.op in ("==", "!="):
                same = type(lhs) is type(rhs) and lhs == rhs
                return int(same if node.op == "==" else not same)
            raise ExprEvalError("type")
        if node.op == "+" and isinstance(lhs, str) and isinstance(rhs, str):
            return lhs + rhs
        if not isinstance(lhs, (int, Fraction)) or not isinstance(rhs, (int, Fraction)):
            raise ExprEvalError("type")
        if isinstance(lhs, bool) or isinstance(rhs, bool):
            raise ExprEvalError("type")
        a, b = Fraction(lhs), Fraction(rhs)
        if node.op == "+":
            out = a + b
        elif node.op == "-":
            out = a - b
        elif node.op == "*":
            out = a * b
        elif node.op == "/":
            if b == 0:
                raise ExprEvalError("zero")
            out = a / b
        elif node.op == "%":
            if b == 0:
                raise ExprEvalError("zero")
            out = a % b
        elif node.op == "^":
            if b.denominator != 1:
                raise ExprEvalError("type")
            if abs(b) > 64:
                raise ExprEvalError("overflow")
            if a == 0 and b < 0:
                raise ExprEvalError("zero")
            out = a ** int(b)
        else:
            raise AssertionError(node.op)
        return int(out) if out.denominator == 1 else out
    if isinstance(node, Field):
        base = _ref_eval(node.base, env)
        if not isinstance(base, dict) or node.name not in base:
            raise ExprEvalError("field")
        return base[node.name]
    if isinstance(node, Index):
        base = _ref_eval(node.base, env)
        idx = _ref_eval(node.index, env)
        if isinstance(base, dict):
            if not isinstance(idx, str) or idx not in base:
                raise ExprEvalError("field")
            return base[idx]
        if isinstance(base, (list, str)):
            if isinstance(idx, Fraction) and idx.denominator == 1:
                idx = int(idx)
            if isinstance(idx, bool) or not isinstance(idx, int):
                raise ExprEvalError("type")
            if not 0 <= idx < len(base):
                raise ExprEvalError("range")
            return base[idx]
        raise ExprEvalError("type")
    if isinstance(node, Call):
        raise AssertionError("generator does not emit calls")
    raise AssertionError(node)


def _random_source(rng: random.Random, depth: int) -> str:
    if depth <= 0:
        return rng.choice([
            str(rng.randint(0, 20)),
            f"{rng.randint(0, 9)}.{rng.randint(0, 99):02d}",
            "a", "b", "c",
            "j.x",
            f"xs[{rng.randint(0, 4)}]",
        ])
    op = rng.choice(["+", "-", "*", "/", "%", "^", "<", "==", "+", "-", "*"])
    left = _random_source(rng, depth - 1)
    right = _random_source(rng, depth - 1)
    if op == "^":
        right = str(rng.randint(0, 3))
    if rng.random() < 0.15:
        return f"-({left} {op} {right})"
    return f"({left} {op} {right})"


def test_differential_oracle_10000_random_programs():
    rng = random.Random(90210)
    env = {}
    disagreements = []
    for i in range(10_000):
        env = {
            "a": rng.randint(-100, 100),
            "b": rng.randint(1, 40),
            "c": Fraction(rng.randint(-50, 50), rng.randint(1, 9)),
            "j": {"x": rng.randint(-5, 5)},
            "xs": [rng.randint(-9, 9) for _ in range(rng.randint(0, 5))],
        }
        source = _random_source(rng, rng.randint(1, 4))
        program = compile_program(source)
        try:
            got = eval_program(program, env)
        except ExprEvalError:
            got = _ERR
        try:
            want = _ref_eval(program.ast, env)
            if isinstance(want, Fraction) and want.denominator == 1:
                want = int(want)
        except ExprEvalError:
            want = _ERR
        if got != want:
            disagreements.append((source, env, got, want))
    assert not disagreements, disagreements[:3]
