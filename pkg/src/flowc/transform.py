"""Structural plan rewrites.

Every function here is a pure ``plan -> plan`` map: split a model node into
a chain, fuse a redundant chain back together, swap a model node's payload
for a deterministic program, or wrap an unreliable node in a replicated
vote. Each rewrite re-validates its result and refuses to produce a broken
plan. The same rewrites are exposed as a JSON edit-script format so a
remote teacher can request them without emitting a whole plan.
"""

from __future__ import annotations

import re
from dataclasses import replace
from typing import Sequence

from . import expr
from .plan import (
    DEFAULT_LIMITS,
    CodeArtifact,
    Dag,
    ExecutionPlan,
    Node,
    NodeKind,
    OutputType,
    PlanError,
    PlanParseError,
    PromptSpec,
    RoleTag,
    ValidationLimits,
    code_from_jsonable,
    prompt_from_jsonable,
    validate_plan,
)


class TransformError(PlanError):
    """A rewrite precondition failed or the rewritten plan is invalid."""


_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def fresh_id(base: str, taken: set[str]) -> str:
    if base not in taken:
        return base
    n = 2
    while f"{base}{n}" in taken:
        n += 1
    return f"{base}{n}"


def _checked(plan: ExecutionPlan, what: str,
             limits: ValidationLimits | None = None) -> ExecutionPlan:
    report = validate_plan(plan, limits=limits)
    if not report.ok:
        raise TransformError(f"{what} produced an invalid plan: {report.summary()}")
    return plan


def _require_llm(plan: ExecutionPlan, node_id: str, what: str) -> Node:
    node = plan.node(node_id)
    if node.kind is not NodeKind.LLM:
        raise TransformError(f"{what} applies to model nodes only, {node_id!r} is code")
    return node


def _rebind_code(code: dict[str, CodeArtifact],
                 renames: dict[str, str]) -> dict[str, CodeArtifact]:
    """Point downstream programs at a renamed producer node."""
    out: dict[str, CodeArtifact] = {}
    for node_id, artifact in code.items():
        if not set(artifact.inputs) & renames.keys():
            out[node_id] = artifact
            continue
        inputs: list[str] = []
        for name in artifact.inputs:
            renamed = renames.get(name, name)
            if renamed not in inputs:
                inputs.append(renamed)
        program = expr.compile_program(artifact.program)
        live = expr.free_names(program) & renames.keys()
        for old in live:
            if not _IDENT_RE.match(renames[old]):
                raise TransformError(
                    f"cannot rebind {old!r} to {renames[old]!r} inside a program"
                )
        if live:
            program = expr.substitute(
                program, {old: expr.Name(renames[old]) for old in live}
            )
        out[node_id] = CodeArtifact(
            program=program.source, inputs=tuple(inputs), output_type=artifact.output_type
        )
    return out


def refine_prompt(plan: ExecutionPlan, node_id: str, prompt: PromptSpec) -> ExecutionPlan:
    """Replace the prompt of a model node, leaving topology untouched."""
    _require_llm(plan, node_id, "refine_prompt")
    prompts = dict(plan.prompts)
    prompts[node_id] = prompt
    return _checked(replace(plan, prompts=prompts), "refine_prompt")


def part_ids(plan: ExecutionPlan, node_id: str, count: int) -> list[str]:
    """The ids :func:`decompose_node` will assign to the parts."""
    taken = set(plan.graph.nodes) - {node_id}
    out: list[str] = []
    for i in range(1, count + 1):
        part = fresh_id(f"{node_id}_p{i}", taken)
        taken.add(part)
        out.append(part)
    return out


def decompose_node(
    plan: ExecutionPlan,
    node_id: str,
    parts: Sequence[tuple[str, PromptSpec] | tuple[str, PromptSpec, RoleTag]],
) -> ExecutionPlan:
    """Split one model node into a chain of narrower model nodes.

    ``parts`` lists ``(scope, prompt)`` or ``(scope, prompt, role)`` per new
    node, in chain order; parts without a role inherit the original node's.
    The declared sub-scopes are recorded as the new nodes' scopes; together
    they stand in for the original node's scope. In-edges move to the first
    part, out-edges to the last. A single part degenerates to a scope/prompt
    replacement.
    """
    node = _require_llm(plan, node_id, "decompose_node")
    if len(parts) < 1:
        raise TransformError("decompose_node needs at least one part")
    ids = part_ids(plan, node_id, len(parts))

    nodes = {n: v for n, v in plan.graph.nodes.items() if n != node_id}
    prompts = {n: p for n, p in plan.prompts.items() if n != node_id}
    for part, spec in zip(ids, parts):
        scope, prompt = spec[0], spec[1]
        role = spec[2] if len(spec) > 2 else node.role
        if not isinstance(prompt, PromptSpec):
            raise TransformError("each part needs a PromptSpec")
        if not isinstance(role, RoleTag):
            raise TransformError("part role must be a RoleTag")
        nodes[part] = Node(id=part, kind=NodeKind.LLM, scope=scope, role=role)
        prompts[part] = prompt

    # In-edges target the head of the chain, out-edges leave the tail.
    edges = set()
    for a, b in plan.graph.edges:
        if b == node_id:
            edges.add((a, ids[0]))
        elif a == node_id:
            edges.add((ids[-1], b))
        else:
            edges.add((a, b))
    for left, right in zip(ids, ids[1:]):
        edges.add((left, right))

    rewritten = replace(
        plan,
        graph=Dag(nodes=nodes, edges=frozenset(edges)),
        prompts=prompts,
        code=_rebind_code(dict(plan.code), {node_id: ids[-1]}),
    )
    return _checked(rewritten, "decompose_node")


def fuse_nodes(
    plan: ExecutionPlan, first: str, second: str, merged_prompt: PromptSpec
) -> ExecutionPlan:
    """Merge a two-node model chain into a single node.

    Requires the edge ``(first, second)`` with no other edges touching the
    seam: ``second`` must have no other in-edges and ``first`` no other
    out-edges.
    """
    node_a = _require_llm(plan, first, "fuse_nodes")
    node_b = _require_llm(plan, second, "fuse_nodes")
    if (first, second) not in plan.graph.edges:
        raise TransformError(f"no edge from {first!r} to {second!r}")
    if plan.graph.predecessors(second) != [first]:
        raise TransformError(f"{second!r} has in-edges besides {first!r}")
    if plan.graph.successors(first) != [second]:
        raise TransformError(f"{first!r} has out-edges besides {second!r}")

    taken = set(plan.graph.nodes) - {first, second}
    merged_base = re.sub(r"[^A-Za-z0-9_]", "_", f"{first}_{second}")
    merged = fresh_id(merged_base, taken)
    role = node_a.role if node_a.role is node_b.role else RoleTag.OTHER

    nodes = {n: v for n, v in plan.graph.nodes.items() if n not in (first, second)}
    nodes[merged] = Node(
        id=merged,
        kind=NodeKind.LLM,
        scope=f"{node_a.scope}; {node_b.scope}",
        role=role,
    )
    prompts = {n: p for n, p in plan.prompts.items() if n not in (first, second)}
    prompts[merged] = merged_prompt

    edges = set()
    for a, b in plan.graph.edges:
        if (a, b) == (first, second):
            continue
        a = merged if a in (first, second) else a
        b = merged if b in (first, second) else b
        edges.add((a, b))

    rewritten = replace(
        plan,
        graph=Dag(nodes=nodes, edges=frozenset(edges)),
        prompts=prompts,
        code=_rebind_code(dict(plan.code), {first: merged, second: merged}),
    )
    return _checked(rewritten, "fuse_nodes")


def should_fuse(
    risk_merged: float,
    risk_current: float,
    acc_first: float,
    acc_second: float,
    eps_cost: float,
    acc_tol: float = 0.05,
) -> bool:
    """Fuse when the merged plan is not meaningfully worse and the two
    nodes perform near-identically (redundancy, not specialization)."""
    return (risk_merged - risk_current < eps_cost) and abs(acc_first - acc_second) <= acc_tol


def offload_node(plan: ExecutionPlan, node_id: str, artifact: CodeArtifact) -> ExecutionPlan:
    """Swap a model node's prompt for a deterministic program.

    Topology and edges are unchanged; only the payload and kind flip. The
    program's inputs must already be satisfied by the node's predecessors,
    which validation enforces.
    """
    node = _require_llm(plan, node_id, "offload_node")
    nodes = dict(plan.graph.nodes)
    nodes[node_id] = Node(id=node_id, kind=NodeKind.CODE, scope=node.scope, role=node.role)
    prompts = {n: p for n, p in plan.prompts.items() if n != node_id}
    code = dict(plan.code)
    code[node_id] = artifact
    rewritten = replace(
        plan,
        graph=Dag(nodes=nodes, edges=plan.graph.edges),
        prompts=prompts,
        code=code,
    )
    return _checked(rewritten, "offload_node")


def _pass_through(preds: list[str]) -> CodeArtifact:
    if not preds:
        return CodeArtifact(program="task", inputs=(), output_type=OutputType.TEXT)
    for pred in preds:
        if not _IDENT_RE.match(pred):
            raise TransformError(
                f"cannot reference predecessor {pred!r} from a program; rename the node"
            )
    if len(preds) == 1:
        return CodeArtifact(program=preds[0], inputs=(preds[0],), output_type=OutputType.TEXT)
    joined = ' + "\\n" + '.join(f"text({p})" for p in preds)
    return CodeArtifact(program=joined, inputs=tuple(preds), output_type=OutputType.TEXT)


def wrap_consensus(
    plan: ExecutionPlan,
    node_id: str,
    perturbations: Sequence[PromptSpec],
    vote_code: CodeArtifact | None = None,
    limits: ValidationLimits | None = DEFAULT_LIMITS,
) -> ExecutionPlan:
    """Replace one model node with a fan-in / replicas / vote subgraph.

    The replicas share the node's work but must share the same base prompt
    text, differing only in perturbation or temperature. Each replica's
    output is parsed to a number at the trace boundary (the executor
    extracts answers from nodes that feed a vote), so the default vote
    program aggregates numbers directly. For three perturbations the plan
    gains four nodes net.
    """
    node = _require_llm(plan, node_id, "wrap_consensus")
    if len(perturbations) < 2:
        raise TransformError(
            f"wrap_consensus needs at least 2 replicas, got {len(perturbations)}"
        )
    if limits is not None and len(perturbations) > limits.max_fan_out:
        raise TransformError(
            f"wrap_consensus allows at most {limits.max_fan_out} replicas, "
            f"got {len(perturbations)}"
        )
    base_texts = {p.text for p in perturbations}
    if len(base_texts) != 1:
        raise TransformError("replicas must share one base prompt text")

    preds = plan.graph.predecessors(node_id)
    succs = plan.graph.successors(node_id)
    taken = set(plan.graph.nodes) - {node_id}
    fan_in = fresh_id(f"{node_id}_in", taken)
    taken.add(fan_in)
    replicas: list[str] = []
    for i in range(1, len(perturbations) + 1):
        rid = fresh_id(f"{node_id}_r{i}", taken)
        taken.add(rid)
        replicas.append(rid)
    vote = fresh_id(f"{node_id}_vote", taken)

    nodes = {n: v for n, v in plan.graph.nodes.items() if n != node_id}
    prompts = {n: p for n, p in plan.prompts.items() if n != node_id}
    code = _rebind_code(dict(plan.code), {node_id: vote})

    nodes[fan_in] = Node(id=fan_in, kind=NodeKind.CODE,
                         scope=f"forward inputs of {node_id}", role=RoleTag.FAN_IN)
    code[fan_in] = _pass_through(preds)
    for rid, spec in zip(replicas, perturbations):
        nodes[rid] = Node(id=rid, kind=NodeKind.LLM, scope=node.scope, role=RoleTag.SOLVER)
        prompts[rid] = spec
    nodes[vote] = Node(id=vote, kind=NodeKind.CODE,
                       scope=f"majority vote over {len(replicas)} replicas", role=RoleTag.VOTE)
    if vote_code is None:
        vote_code = CodeArtifact(
            program="majority_vote([" + ", ".join(replicas) + "])",
            inputs=tuple(replicas),
        )
    code[vote] = vote_code

    edges = {(a, b) for a, b in plan.graph.edges if node_id not in (a, b)}
    for p in preds:
        edges.add((p, fan_in))
    for rid in replicas:
        edges.add((fan_in, rid))
        edges.add((rid, vote))
    for s in succs:
        edges.add((vote, s))

    rewritten = replace(
        plan,
        graph=Dag(nodes=nodes, edges=frozenset(edges)),
        prompts=prompts,
        code=code,
    )
    return _checked(rewritten, "wrap_consensus", limits=None)


# --------------------------------------------------------------------------
# JSON edit scripts
#
# {"edits": [
#   {"op": "refine_prompt", "node": "v0", "prompt": {...}},
#   {"op": "decompose", "node": "v0",
#    "parts": [{"scope": "...", "prompt": {...}, "role": "parse"?}, ...]},
#   {"op": "fuse", "first": "a", "second": "b", "prompt": {...}},
#   {"op": "offload", "node": "v1", "code": {...}},
#   {"op": "consensus", "node": "v0", "prompts": [{...}, {...}, {...}], "vote": {...}|null}
# ]}


def apply_edit(plan: ExecutionPlan, edit: dict,
               limits: ValidationLimits = DEFAULT_LIMITS) -> ExecutionPlan:
    if not isinstance(edit, dict) or "op" not in edit:
        raise PlanParseError("edit must be an object with an op field")
    op = edit["op"]
    if op == "refine_prompt":
        return refine_prompt(
            plan, _edit_node(edit), prompt_from_jsonable(edit.get("prompt"), "edit.prompt")
        )
    if op == "decompose":
        raw_parts = edit.get("parts")
        if not isinstance(raw_parts, list) or not raw_parts:
            raise PlanParseError("edit.parts must be a non-empty list")
        parts = []
        for i, raw in enumerate(raw_parts):
            if not isinstance(raw, dict) or not isinstance(raw.get("scope"), str):
                raise PlanParseError(f"edit.parts[{i}] needs a scope")
            prompt = prompt_from_jsonable(raw.get("prompt"), f"edit.parts[{i}].prompt")
            if "role" in raw:
                try:
                    role = RoleTag(raw["role"])
                except ValueError:
                    raise PlanParseError(f"edit.parts[{i}].role is not a role tag") from None
                parts.append((raw["scope"], prompt, role))
            else:
                parts.append((raw["scope"], prompt))
        return decompose_node(plan, _edit_node(edit), parts)
    if op == "fuse":
        first, second = edit.get("first"), edit.get("second")
        if not isinstance(first, str) or not isinstance(second, str):
            raise PlanParseError("fuse edit needs first and second node ids")
        return fuse_nodes(
            plan, first, second, prompt_from_jsonable(edit.get("prompt"), "edit.prompt")
        )
    if op == "offload":
        return offload_node(
            plan, _edit_node(edit), code_from_jsonable(edit.get("code"), "edit.code")
        )
    if op == "consensus":
        raw_prompts = edit.get("prompts")
        if not isinstance(raw_prompts, list):
            raise PlanParseError("edit.prompts must be a list")
        prompts = [
            prompt_from_jsonable(raw, f"edit.prompts[{i}]")
            for i, raw in enumerate(raw_prompts)
        ]
        vote = edit.get("vote")
        vote_code = None if vote is None else code_from_jsonable(vote, "edit.vote")
        return wrap_consensus(plan, _edit_node(edit), prompts, vote_code, limits=limits)
    raise PlanParseError(f"unknown edit op {op!r}")


def _edit_node(edit: dict) -> str:
    node = edit.get("node")
    if not isinstance(node, str):
        raise PlanParseError("edit needs a node id")
    return node


def apply_edit_script(plan: ExecutionPlan, script: dict | list,
                      limits: ValidationLimits = DEFAULT_LIMITS) -> ExecutionPlan:
    """Apply a JSON edit script in order. Any failing step aborts the
    whole script; the input plan is never mutated."""
    edits = script.get("edits") if isinstance(script, dict) else script
    if not isinstance(edits, list):
        raise PlanParseError("edit script must be a list or {'edits': [...]}")
    out = plan
    for edit in edits:
        out = apply_edit(out, edit, limits=limits)
    return out
