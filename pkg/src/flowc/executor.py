"""Plan execution with full tracing.

``run_task`` walks the plan in topological layers, calling the student
backend at model nodes and the expression evaluator at code nodes, and
records every node's inputs, output and cost. A node failure fails the
task (downstream nodes are skipped) but never the batch: ``run_batch``
isolates tasks from each other.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from . import expr
from .plan import (
    TASK_BINDING,
    ExecutionPlan,
    InvalidPlanError,
    NodeKind,
    OutputType,
    RoleTag,
    validate_plan,
)


class StudentError(RuntimeError):
    """A model call failed for this node; the task fails, the batch survives."""


@dataclass(frozen=True)
class TaskSample:
    task_id: str
    prompt_text: str
    gold_answer: expr.Number
    family_tag: str = ""


@dataclass(frozen=True)
class StudentCall:
    """Everything a student backend may look at for one model call."""

    node_id: str
    task_id: str
    prompt_text: str
    task_text: str
    inputs: dict[str, str]
    temperature: float
    role: RoleTag
    scope: str
    family_tag: str = ""


@dataclass(frozen=True)
class StudentReply:
    text: str
    token_cost: int


class Student(Protocol):
    def complete(self, call: StudentCall) -> StudentReply: ...


class TraceStatus(str, Enum):
    OK = "ok"
    NODE_ERROR = "node_error"


@dataclass(frozen=True)
class NodeRecord:
    node_id: str
    inputs: dict[str, expr.Value]
    raw_output: str
    parsed_output: expr.Value
    token_cost: int
    wall_time: float


@dataclass(frozen=True)
class ExecutionTrace:
    task_id: str
    records: tuple[NodeRecord, ...]
    final_answer: expr.Number | None
    status: TraceStatus
    error_node: str | None = None
    error_reason: str | None = None

    @property
    def ok(self) -> bool:
        return self.status is TraceStatus.OK


def mock_token_cost(text: str) -> int:
    """Characters / 4, rounded up: the cost proxy used by offline backends."""
    return (len(text) + 3) // 4


def compose_prompt(plan: ExecutionPlan, node_id: str, task: TaskSample,
                   rendered_inputs: dict[str, str]) -> str:
    spec = plan.prompts[node_id]
    parts = [spec.text]
    if spec.perturbation:
        parts.append(spec.perturbation)
    parts.append(f"Task:\n{task.prompt_text}")
    for name in sorted(rendered_inputs):
        parts.append(f"Input {name}:\n{rendered_inputs[name]}")
    return "\n\n".join(parts)


def _feeds_vote(plan: ExecutionPlan, node_id: str) -> bool:
    return any(
        plan.graph.nodes[succ].role is RoleTag.VOTE
        for succ in plan.graph.successors(node_id)
    )


@dataclass
class _NodeFailure(Exception):
    node_id: str
    reason: str


def _run_llm_node(plan: ExecutionPlan, node_id: str, task: TaskSample,
                  student: Student, values: dict[str, expr.Value],
                  is_sink: bool) -> NodeRecord:
    node = plan.graph.nodes[node_id]
    inputs = {p: values[p] for p in plan.graph.predecessors(node_id)}
    rendered = {name: expr.render_text(v) for name, v in inputs.items()}
    spec = plan.prompts[node_id]
    call = StudentCall(
        node_id=node_id,
        task_id=task.task_id,
        prompt_text=compose_prompt(plan, node_id, task, rendered),
        task_text=task.prompt_text,
        inputs=rendered,
        temperature=spec.temperature,
        role=node.role,
        scope=node.scope,
        family_tag=task.family_tag,
    )
    started = time.perf_counter()
    try:
        reply = student.complete(call)
    except StudentError as exc:
        raise _NodeFailure(node_id, f"student error: {exc}") from exc
    parsed: expr.Value = reply.text
    if is_sink or _feeds_vote(plan, node_id):
        try:
            parsed = expr.extract_answer(reply.text)
        except expr.ExtractionError as exc:
            raise _NodeFailure(node_id, f"extraction error: {exc}") from exc
    return NodeRecord(
        node_id=node_id,
        inputs=inputs,
        raw_output=reply.text,
        parsed_output=parsed,
        token_cost=reply.token_cost,
        wall_time=time.perf_counter() - started,
    )


def _run_code_node(plan: ExecutionPlan, node_id: str, task: TaskSample,
                   values: dict[str, expr.Value]) -> NodeRecord:
    artifact = plan.code[node_id]
    bindings: dict[str, expr.Value] = {name: values[name] for name in artifact.inputs}
    bindings[TASK_BINDING] = task.prompt_text
    started = time.perf_counter()
    try:
        value = expr.eval_program(artifact.program, bindings)
    except expr.ExprError as exc:
        raise _NodeFailure(node_id, f"program error: {exc}") from exc
    if artifact.output_type is OutputType.NUMBER and not expr.is_number(value):
        raise _NodeFailure(node_id, f"program returned {type(value).__name__}, declared number")
    if artifact.output_type is OutputType.TEXT and not isinstance(value, str):
        raise _NodeFailure(node_id, f"program returned {type(value).__name__}, declared text")
    inputs = {name: values[name] for name in artifact.inputs}
    return NodeRecord(
        node_id=node_id,
        inputs=inputs,
        raw_output=expr.render_text(value),
        parsed_output=value,
        token_cost=0,
        wall_time=time.perf_counter() - started,
    )


def run_task(plan: ExecutionPlan, task: TaskSample, student: Student, *,
             node_parallelism: int = 1) -> ExecutionTrace:
    """Execute one task through the plan, producing a full trace.

    Node failures are captured in the trace status; only backend-fatal
    exceptions (anything other than :class:`StudentError` and expression
    errors) propagate.
    """
    report = validate_plan(plan, limits=None)
    if not report.ok:
        raise InvalidPlanError(report)
    sink = plan.graph.sinks()[0]

    values: dict[str, expr.Value] = {}
    records: list[NodeRecord] = []

    def execute(node_id: str) -> NodeRecord:
        if plan.graph.nodes[node_id].kind is NodeKind.LLM:
            return _run_llm_node(plan, node_id, task, student, values, node_id == sink)
        return _run_code_node(plan, node_id, task, values)

    def failed(failure: _NodeFailure) -> ExecutionTrace:
        return ExecutionTrace(
            task_id=task.task_id,
            records=tuple(records),
            final_answer=None,
            status=TraceStatus.NODE_ERROR,
            error_node=failure.node_id,
            error_reason=failure.reason,
        )

    for layer in plan.graph.layers():
        outcomes: dict[str, NodeRecord | _NodeFailure] = {}
        if node_parallelism > 1 and len(layer) > 1:
            with ThreadPoolExecutor(max_workers=node_parallelism) as pool:
                futures = {node_id: pool.submit(execute, node_id) for node_id in layer}
            for node_id, future in futures.items():
                try:
                    outcomes[node_id] = future.result()
                except _NodeFailure as exc:
                    outcomes[node_id] = exc
        else:
            for node_id in layer:
                try:
                    outcomes[node_id] = execute(node_id)
                except _NodeFailure as exc:
                    outcomes[node_id] = exc
                    break
        # Nodes in a layer are causally independent; commit their results in
        # id order so parallel and sequential runs yield identical traces.
        for node_id in layer:
            if node_id not in outcomes:
                continue
            outcome = outcomes[node_id]
            if isinstance(outcome, _NodeFailure):
                return failed(outcome)
            records.append(outcome)
            values[node_id] = outcome.parsed_output

    final = values[sink]
    if isinstance(final, str):
        try:
            final = expr.extract_answer(final)
        except expr.ExtractionError as exc:
            return failed(_NodeFailure(sink, f"extraction error: {exc}"))
    if not expr.is_number(final):
        return failed(_NodeFailure(sink, "sink output is not numeric"))
    return ExecutionTrace(
        task_id=task.task_id,
        records=tuple(records),
        final_answer=final,
        status=TraceStatus.OK,
    )


def run_batch(plan: ExecutionPlan, tasks: Sequence[TaskSample], student: Student, *,
              task_parallelism: int = 1, node_parallelism: int = 1) -> list[ExecutionTrace]:
    """Run every task; results align with the input order."""
    if task_parallelism > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=task_parallelism) as pool:
            return list(pool.map(
                lambda t: run_task(plan, t, student, node_parallelism=node_parallelism),
                tasks,
            ))
    return [run_task(plan, t, student, node_parallelism=node_parallelism) for t in tasks]


# --------------------------------------------------------------------------
# Trace persistence (JSONL, one trace per line)

TRACE_SCHEMA_ID = "flowc-trace/1"


def _value_to_jsonable(value: expr.Value) -> object:
    """Record-value encoding. Non-integer rationals are tagged as
    {"$frac": "p/q"} so numbers and text stay distinguishable on reload."""
    if isinstance(value, Fraction):
        if value.denominator == 1:
            return value.numerator
        return {"$frac": f"{value.numerator}/{value.denominator}"}
    if isinstance(value, list):
        return [_value_to_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _value_to_jsonable(v) for k, v in value.items()}
    return value


def _value_from_jsonable(value: object) -> expr.Value:
    if isinstance(value, dict):
        if set(value) == {"$frac"} and isinstance(value["$frac"], str):
            return Fraction(value["$frac"])
        return {k: _value_from_jsonable(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_value_from_jsonable(v) for v in value]
    if isinstance(value, float):
        return Fraction(str(value))
    return value


def trace_to_jsonable(trace: ExecutionTrace) -> dict:
    return {
        "schema": TRACE_SCHEMA_ID,
        "task_id": trace.task_id,
        "status": trace.status.value,
        "error_node": trace.error_node,
        "error_reason": trace.error_reason,
        "final_answer": None if trace.final_answer is None else expr.to_jsonable(trace.final_answer),
        "records": [
            {
                "node_id": r.node_id,
                "inputs": {k: _value_to_jsonable(v) for k, v in r.inputs.items()},
                "raw_output": r.raw_output,
                "parsed_output": _value_to_jsonable(r.parsed_output),
                "token_cost": r.token_cost,
                "wall_time": r.wall_time,
            }
            for r in trace.records
        ],
    }


def number_from_jsonable(value: object) -> expr.Number:
    if isinstance(value, bool) or value is None:
        raise ValueError(f"not a number: {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        if "/" in value:
            return Fraction(value)
        return expr.parse_number(value)
    if isinstance(value, float):
        return Fraction(str(value))
    raise ValueError(f"not a number: {value!r}")


def trace_from_jsonable(doc: dict) -> ExecutionTrace:
    if doc.get("schema") != TRACE_SCHEMA_ID:
        raise ValueError(f"unsupported trace schema {doc.get('schema')!r}")
    records = tuple(
        NodeRecord(
            node_id=r["node_id"],
            inputs={k: _value_from_jsonable(v)
                    for k, v in r.get("inputs", {}).items()},
            raw_output=r["raw_output"],
            parsed_output=_value_from_jsonable(r["parsed_output"]),
            token_cost=int(r["token_cost"]),
            wall_time=float(r.get("wall_time", 0.0)),
        )
        for r in doc.get("records", [])
    )
    final = doc.get("final_answer")
    return ExecutionTrace(
        task_id=doc["task_id"],
        records=records,
        final_answer=None if final is None else number_from_jsonable(final),
        status=TraceStatus(doc["status"]),
        error_node=doc.get("error_node"),
        error_reason=doc.get("error_reason"),
    )


def write_traces_jsonl(path: str | Path, traces: Iterable[ExecutionTrace]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for trace in traces:
            handle.write(json.dumps(trace_to_jsonable(trace), sort_keys=True) + "\n")


def read_traces_jsonl(path: str | Path) -> list[ExecutionTrace]:
    traces = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                traces.append(trace_from_jsonable(json.loads(line)))
    return traces
