"""Execution plans: a DAG of model and code nodes plus their payloads.

A plan owns three aligned pieces of state: the graph topology, a prompt for
every model node, and a deterministic program for every code node. Plans are
value objects; every rewrite produces a new plan. Validation never raises on
a bad plan, it returns a report listing violations, so callers can feed the
report back to whatever proposed the plan.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping

from . import expr

SCHEMA_ID = "flowc-plan/1"

# Name every program may read without declaring it: the original task text.
TASK_BINDING = "task"


class PlanError(ValueError):
    """Base class for plan failures."""


class CycleError(PlanError):
    """The graph is not acyclic."""


class InvalidPlanError(PlanError):
    """An operation that requires a valid plan was given an invalid one."""

    def __init__(self, report: "ValidationReport") -> None:
        super().__init__("invalid plan: " + "; ".join(v.message for v in report.violations))
        self.report = report


class PlanParseError(PlanError):
    """Plan bytes could not be decoded. ``position`` is a character offset
    into the input when the failure is syntactic, else ``None``."""

    def __init__(self, message: str, position: int | None = None) -> None:
        suffix = f" (at offset {position})" if position is not None else ""
        super().__init__(message + suffix)
        self.position = position


class NodeKind(str, Enum):
    LLM = "llm"
    CODE = "code"


class RoleTag(str, Enum):
    SOLVER = "solver"
    PARSE = "parse"
    EVAL = "eval"
    VOTE = "vote"
    FAN_IN = "fan_in"
    OTHER = "other"


class OutputType(str, Enum):
    NUMBER = "number"
    JSON = "json"
    TEXT = "text"


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    scope: str
    role: RoleTag = RoleTag.OTHER


@dataclass(frozen=True)
class PromptSpec:
    """Prompt payload of a model node.

    ``perturbation`` is an optional suffix used to decorrelate replicas of
    the same base prompt; ``temperature`` is forwarded to the backend.
    """

    text: str
    perturbation: str | None = None
    temperature: float = 0.0


@dataclass(frozen=True)
class CodeArtifact:
    """Program payload of a code node.

    ``inputs`` names the upstream nodes whose outputs the program reads, in
    binding order. The program may additionally read the reserved
    ``task`` binding, which always carries the original task text.
    """

    program: str
    inputs: tuple[str, ...] = ()
    output_type: OutputType = OutputType.NUMBER


@dataclass(frozen=True)
class Dag:
    """Directed graph over named nodes. Acyclicity is checked by
    validation, not by construction, so partially built graphs can exist."""

    nodes: dict[str, Node]
    edges: frozenset[tuple[str, str]]

    @staticmethod
    def of(nodes: Iterable[Node], edges: Iterable[tuple[str, str]]) -> "Dag":
        table: dict[str, Node] = {}
        for node in nodes:
            if node.id in table:
                raise PlanError(f"duplicate node {node.id!r}")
            table[node.id] = node
        return Dag(nodes=table, edges=frozenset(edges))

    def predecessors(self, node_id: str) -> list[str]:
        return sorted(a for a, b in self.edges if b == node_id)

    def successors(self, node_id: str) -> list[str]:
        return sorted(b for a, b in self.edges if a == node_id)

    def sources(self) -> list[str]:
        have_in = {b for _, b in self.edges}
        return sorted(n for n in self.nodes if n not in have_in)

    def sinks(self) -> list[str]:
        have_out = {a for a, _ in self.edges}
        return sorted(n for n in self.nodes if n not in have_out)

    def topological_order(self) -> list[str]:
        """Deterministic topological order (lexicographic tie-break)."""
        indegree = {n: 0 for n in self.nodes}
        for _, b in self.edges:
            if b in indegree:
                indegree[b] += 1
        ready = [n for n, d in indegree.items() if d == 0]
        heapq.heapify(ready)
        order: list[str] = []
        while ready:
            node = heapq.heappop(ready)
            order.append(node)
            for succ in self.successors(node):
                indegree[succ] -= 1
                if indegree[succ] == 0:
                    heapq.heappush(ready, succ)
        if len(order) != len(self.nodes):
            raise CycleError("graph contains a cycle")
        return order

    def layers(self) -> list[list[str]]:
        """Topological level sets; nodes within one layer are independent."""
        order = self.topological_order()
        level: dict[str, int] = {}
        for node in order:
            preds = self.predecessors(node)
            level[node] = 1 + max((level[p] for p in preds), default=-1)
        grouped: dict[int, list[str]] = {}
        for node, lvl in level.items():
            grouped.setdefault(lvl, []).append(node)
        return [sorted(grouped[lvl]) for lvl in sorted(grouped)]

    def depth(self) -> int:
        """Number of nodes on the longest path."""
        if not self.nodes:
            return 0
        return len(self.layers())


@dataclass(frozen=True)
class ExecutionPlan:
    graph: Dag
    prompts: dict[str, PromptSpec] = field(default_factory=dict)
    code: dict[str, CodeArtifact] = field(default_factory=dict)
    plan_id: str = "plan"
    epoch: int = 0

    def node(self, node_id: str) -> Node:
        try:
            return self.graph.nodes[node_id]
        except KeyError:
            raise PlanError(f"no such node {node_id!r}") from None

    def with_meta(self, plan_id: str | None = None, epoch: int | None = None) -> "ExecutionPlan":
        return replace(
            self,
            plan_id=self.plan_id if plan_id is None else plan_id,
            epoch=self.epoch if epoch is None else epoch,
        )


def build_plan(
    nodes: Iterable[Node],
    edges: Iterable[tuple[str, str]],
    prompts: Mapping[str, PromptSpec] | None = None,
    code: Mapping[str, CodeArtifact] | None = None,
    plan_id: str = "plan",
    epoch: int = 0,
) -> ExecutionPlan:
    return ExecutionPlan(
        graph=Dag.of(nodes, edges),
        prompts=dict(prompts or {}),
        code=dict(code or {}),
        plan_id=plan_id,
        epoch=epoch,
    )


@dataclass(frozen=True)
class ValidationLimits:
    """Budget limits a plan must stay inside to be worth executing."""

    max_description_length: int = 4000
    max_dag_depth: int = 16
    max_fan_out: int = 8

    def __post_init__(self) -> None:
        for name in ("max_description_length", "max_dag_depth", "max_fan_out"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


DEFAULT_LIMITS = ValidationLimits()


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    node_id: str | None = None


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        if self.ok:
            return "valid"
        return "; ".join(f"[{v.code}] {v.message}" for v in self.violations)


def _structural_violations(plan: ExecutionPlan) -> list[Violation]:
    out: list[Violation] = []
    graph = plan.graph
    if not graph.nodes:
        out.append(Violation("empty-graph", "plan has no nodes"))
        return out

    for a, b in sorted(graph.edges):
        if a == b:
            out.append(Violation("self-edge", f"self-edge at {a!r}", a))
        if a not in graph.nodes:
            out.append(Violation("unknown-endpoint", f"edge source {a!r} is not a node", a))
        if b not in graph.nodes:
            out.append(Violation("unknown-endpoint", f"edge target {b!r} is not a node", b))

    acyclic = True
    if not any(v.code in ("self-edge", "unknown-endpoint") for v in out):
        try:
            graph.topological_order()
        except CycleError:
            acyclic = False
            out.append(Violation("cycle", "graph contains a cycle"))

    for node_id in sorted(graph.nodes):
        node = graph.nodes[node_id]
        if not node.scope.strip():
            out.append(Violation("empty-scope", f"node {node_id!r} has an empty scope", node_id))
        has_prompt = node_id in plan.prompts
        has_code = node_id in plan.code
        if node.kind is NodeKind.LLM and not (has_prompt and not has_code):
            out.append(Violation(
                "kind-partition",
                f"model node {node_id!r} must carry a prompt and no program",
                node_id,
            ))
        if node.kind is NodeKind.CODE and not (has_code and not has_prompt):
            out.append(Violation(
                "kind-partition",
                f"code node {node_id!r} must carry a program and no prompt",
                node_id,
            ))

    for node_id in sorted(set(plan.prompts) - set(graph.nodes)):
        out.append(Violation("orphan-payload", f"prompt for unknown node {node_id!r}", node_id))
    for node_id in sorted(set(plan.code) - set(graph.nodes)):
        out.append(Violation("orphan-payload", f"program for unknown node {node_id!r}", node_id))

    for node_id in sorted(plan.prompts):
        if node_id not in graph.nodes:
            continue
        spec = plan.prompts[node_id]
        if not spec.text.strip():
            out.append(Violation("empty-prompt", f"prompt at {node_id!r} is empty", node_id))
        if not 0.0 <= spec.temperature <= 2.0:
            out.append(Violation(
                "temperature-range",
                f"temperature {spec.temperature} at {node_id!r} outside [0, 2]",
                node_id,
            ))

    for node_id in sorted(plan.code):
        if node_id not in graph.nodes:
            continue
        artifact = plan.code[node_id]
        preds = set(graph.predecessors(node_id))
        if len(set(artifact.inputs)) != len(artifact.inputs):
            out.append(Violation("duplicate-input", f"duplicate input binding at {node_id!r}", node_id))
        for name in artifact.inputs:
            if name not in preds:
                out.append(Violation(
                    "unbound-input",
                    f"program input {name!r} at {node_id!r} is not an in-edge predecessor",
                    node_id,
                ))
        try:
            program = expr.compile_program(artifact.program)
        except expr.ExprSyntaxError as exc:
            out.append(Violation("program-syntax", f"program at {node_id!r}: {exc}", node_id))
        else:
            allowed = set(artifact.inputs) | {TASK_BINDING}
            for name in sorted(expr.free_names(program) - allowed):
                out.append(Violation(
                    "unbound-name",
                    f"program at {node_id!r} reads undeclared name {name!r}",
                    node_id,
                ))

    if acyclic:
        sources = graph.sources()
        sinks = graph.sinks()
        if len(sources) != 1:
            out.append(Violation(
                "source-count", f"plan must have exactly one source, found {len(sources)}"
            ))
        if len(sinks) != 1:
            out.append(Violation(
                "sink-count", f"plan must have exactly one sink, found {len(sinks)}"
            ))
    return out


def validate_plan(
    plan: ExecutionPlan, limits: ValidationLimits | None = DEFAULT_LIMITS
) -> ValidationReport:
    """Check every plan invariant; with ``limits`` also check budgets.

    Returns a report rather than raising: invalid candidate plans are
    ordinary data during optimization.
    """
    out = _structural_violations(plan)
    structurally_ok = not out
    if limits is not None:
        length = description_length(plan)
        if length > limits.max_description_length:
            out.append(Violation(
                "description-length",
                f"serialized length {length} tokens exceeds limit "
                f"{limits.max_description_length}",
            ))
        if structurally_ok:
            depth = plan.graph.depth()
            if depth > limits.max_dag_depth:
                out.append(Violation(
                    "dag-depth", f"depth {depth} exceeds limit {limits.max_dag_depth}"
                ))
            for node_id in sorted(plan.graph.nodes):
                fan_out = len(plan.graph.successors(node_id))
                if fan_out > limits.max_fan_out:
                    out.append(Violation(
                        "fan-out",
                        f"fan-out {fan_out} at {node_id!r} exceeds limit {limits.max_fan_out}",
                        node_id,
                    ))
    return ValidationReport(violations=tuple(out))


# --------------------------------------------------------------------------
# Wire format


def prompt_to_jsonable(spec: PromptSpec) -> dict:
    return {
        "text": spec.text,
        "perturbation": spec.perturbation,
        "temperature": spec.temperature,
    }


def prompt_from_jsonable(raw: object, where: str = "prompt") -> PromptSpec:
    if not isinstance(raw, dict) or not isinstance(raw.get("text"), str):
        raise PlanParseError(f"{where} must be an object with a text field")
    perturbation = raw.get("perturbation")
    if perturbation is not None and not isinstance(perturbation, str):
        raise PlanParseError(f"{where}.perturbation must be a string or null")
    temperature = raw.get("temperature", 0.0)
    if isinstance(temperature, bool) or not isinstance(temperature, (int, float)):
        raise PlanParseError(f"{where}.temperature must be a number")
    return PromptSpec(text=raw["text"], perturbation=perturbation, temperature=float(temperature))


def code_to_jsonable(artifact: CodeArtifact) -> dict:
    return {
        "program": artifact.program,
        "inputs": list(artifact.inputs),
        "output_type": artifact.output_type.value,
    }


def code_from_jsonable(raw: object, where: str = "code") -> CodeArtifact:
    if not isinstance(raw, dict) or not isinstance(raw.get("program"), str):
        raise PlanParseError(f"{where} must be an object with a program field")
    inputs = raw.get("inputs", [])
    if not isinstance(inputs, list) or not all(isinstance(x, str) for x in inputs):
        raise PlanParseError(f"{where}.inputs must be a list of node ids")
    try:
        output_type = OutputType(raw.get("output_type", "number"))
    except ValueError:
        raise PlanParseError(
            f"{where}.output_type {raw.get('output_type')!r} is not an output type"
        ) from None
    return CodeArtifact(program=raw["program"], inputs=tuple(inputs), output_type=output_type)


def _payload(plan: ExecutionPlan, with_meta: bool) -> dict:
    doc: dict = {
        "nodes": [
            {
                "id": node.id,
                "kind": node.kind.value,
                "scope": node.scope,
                "role": node.role.value,
            }
            for _, node in sorted(plan.graph.nodes.items())
        ],
        "edges": sorted([a, b] for a, b in plan.graph.edges),
        "prompts": {
            node_id: prompt_to_jsonable(spec)
            for node_id, spec in sorted(plan.prompts.items())
        },
        "code": {
            node_id: code_to_jsonable(artifact)
            for node_id, artifact in sorted(plan.code.items())
        },
    }
    if with_meta:
        doc["schema"] = SCHEMA_ID
        doc["plan_id"] = plan.plan_id
        doc["epoch"] = plan.epoch
    return doc


def serialize_plan(plan: ExecutionPlan) -> bytes:
    """Canonical UTF-8 JSON bytes. Equal plans serialize identically
    regardless of container insertion order. Refuses invalid plans."""
    report = validate_plan(plan, limits=None)
    if not report.ok:
        raise InvalidPlanError(report)
    return json.dumps(_payload(plan, with_meta=True), sort_keys=True).encode("utf-8")


def plan_fingerprint(plan: ExecutionPlan) -> bytes:
    """Canonical bytes of the plan body only (topology, prompts, programs).

    Two plans that differ only in ``plan_id`` or ``epoch`` share a
    fingerprint; this is the identity used for repeat detection.
    """
    return json.dumps(_payload(plan, with_meta=False), sort_keys=True).encode("utf-8")


def description_length(plan: ExecutionPlan) -> int:
    """Whitespace-delimited token count of the serialized plan."""
    text = json.dumps(_payload(plan, with_meta=True), sort_keys=True)
    return len(text.split())


def _expect(condition: bool, message: str) -> None:
    if not condition:
        raise PlanParseError(message)


def parse_plan(data: bytes | str) -> ExecutionPlan:
    """Decode and validate plan bytes produced by :func:`serialize_plan`.

    Syntax errors carry the character offset of the failure; semantic
    errors (duplicate node, unknown edge endpoint, invariant violations)
    name the offending element.
    """
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PlanParseError(f"malformed plan bytes: {exc.msg}", exc.pos) from None

    _expect(isinstance(doc, dict), "plan document must be a JSON object")
    schema = doc.get("schema")
    if schema != SCHEMA_ID:
        raise PlanParseError(f"unsupported schema {schema!r}, expected {SCHEMA_ID!r}")
    _expect(isinstance(doc.get("plan_id"), str), "plan_id must be a string")
    _expect(isinstance(doc.get("epoch"), int) and not isinstance(doc.get("epoch"), bool),
            "epoch must be an integer")
    _expect(isinstance(doc.get("nodes"), list), "nodes must be a list")
    _expect(isinstance(doc.get("edges"), list), "edges must be a list")
    _expect(isinstance(doc.get("prompts"), dict), "prompts must be an object")
    _expect(isinstance(doc.get("code"), dict), "code must be an object")

    nodes: list[Node] = []
    seen: set[str] = set()
    for i, raw in enumerate(doc["nodes"]):
        _expect(isinstance(raw, dict), f"nodes[{i}] must be an object")
        node_id = raw.get("id")
        _expect(isinstance(node_id, str) and bool(node_id), f"nodes[{i}].id must be a non-empty string")
        if node_id in seen:
            raise PlanParseError(f"duplicate node {node_id!r}")
        seen.add(node_id)
        try:
            kind = NodeKind(raw.get("kind"))
        except ValueError:
            raise PlanParseError(f"nodes[{i}].kind {raw.get('kind')!r} is not a node kind") from None
        try:
            role = RoleTag(raw.get("role", "other"))
        except ValueError:
            raise PlanParseError(f"nodes[{i}].role {raw.get('role')!r} is not a role tag") from None
        scope = raw.get("scope")
        _expect(isinstance(scope, str), f"nodes[{i}].scope must be a string")
        nodes.append(Node(id=node_id, kind=kind, scope=scope, role=role))

    edges: list[tuple[str, str]] = []
    for i, raw in enumerate(doc["edges"]):
        _expect(
            isinstance(raw, list) and len(raw) == 2
            and all(isinstance(x, str) for x in raw),
            f"edges[{i}] must be a pair of node ids",
        )
        edges.append((raw[0], raw[1]))

    prompts = {
        node_id: prompt_from_jsonable(raw, where=f"prompts[{node_id!r}]")
        for node_id, raw in doc["prompts"].items()
    }
    code = {
        node_id: code_from_jsonable(raw, where=f"code[{node_id!r}]")
        for node_id, raw in doc["code"].items()
    }

    try:
        plan = build_plan(
            nodes, edges, prompts, code,
            plan_id=doc["plan_id"], epoch=doc["epoch"],
        )
    except PlanError as exc:
        raise PlanParseError(str(exc)) from None

    report = validate_plan(plan, limits=None)
    if not report.ok:
        raise PlanParseError("plan violates invariants: " + report.summary())
    return plan
