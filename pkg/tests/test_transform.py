"""Structural rewrites: contracts, safety under randomized application,
and the decompose/fuse round trip."""

from __future__ import annotations

import random

import pytest

from flowc.plan import (
    CodeArtifact,
    ExecutionPlan,
    Node,
    NodeKind,
    OutputType,
    PromptSpec,
    RoleTag,
    ValidationLimits,
    build_plan,
    plan_fingerprint,
    validate_plan,
)
from flowc.transform import (
    TransformError,
    apply_edit_script,
    decompose_node,
    fuse_nodes,
    offload_node,
    part_ids,
    refine_prompt,
    should_fuse,
    wrap_consensus,
)
from plangen import make_random_plan


def llm(node_id: str, scope: str = "work") -> Node:
    return Node(id=node_id, kind=NodeKind.LLM, scope=scope, role=RoleTag.SOLVER)


def mono() -> ExecutionPlan:
    return build_plan(
        nodes=[llm("solve", "parse and compute the answer")],
        edges=[],
        prompts={"solve": PromptSpec(text="Solve the task end to end.")},
        plan_id="mono",
    )


def chain3() -> ExecutionPlan:
    return build_plan(
        nodes=[llm("a"), llm("v"), llm("c")],
        edges=[("a", "v"), ("v", "c")],
        prompts={n: PromptSpec(text=f"step {n}") for n in ("a", "v", "c")},
        plan_id="chain",
    )


# --------------------------------------------------------------------------
# decompose


def test_decompose_splits_into_chain():
    parts = [
        ("extract the operands", PromptSpec(text="List the operands as JSON.")),
        ("compute the result", PromptSpec(text="Add the operands.")),
    ]
    out = decompose_node(mono(), "solve", parts)
    assert set(out.graph.nodes) == {"solve_p1", "solve_p2"}
    assert ("solve_p1", "solve_p2") in out.graph.edges
    assert out.graph.nodes["solve_p1"].scope == "extract the operands"
    assert out.prompts["solve_p2"].text == "Add the operands."
    assert validate_plan(out).ok


def test_decompose_rewires_surrounding_edges():
    out = decompose_node(chain3(), "v", [
        ("first half", PromptSpec(text="one")),
        ("second half", PromptSpec(text="two")),
    ])
    assert ("a", "v_p1") in out.graph.edges
    assert ("v_p2", "c") in out.graph.edges
    assert ("v_p1", "v_p2") in out.graph.edges
    assert "v" not in out.graph.nodes
    assert validate_plan(out).ok


def test_decompose_single_part_is_identity_shaped():
    out = decompose_node(chain3(), "v", [("same work", PromptSpec(text="do it"))])
    assert set(out.graph.nodes) == {"a", "v_p1", "c"}
    assert len(out.graph.edges) == len(chain3().graph.edges)
    assert validate_plan(out).ok


def test_decompose_requires_llm_node_and_parts():
    plan = build_plan(
        nodes=[Node(id="k", kind=NodeKind.CODE, scope="s", role=RoleTag.EVAL)],
        edges=[], code={"k": CodeArtifact(program="task", output_type=OutputType.TEXT)},
    )
    with pytest.raises(TransformError, match="model nodes only"):
        decompose_node(plan, "k", [("x", PromptSpec(text="y"))])
    with pytest.raises(TransformError, match="at least one part"):
        decompose_node(mono(), "solve", [])
    with pytest.raises(Exception, match="no such node"):
        decompose_node(mono(), "ghost", [("x", PromptSpec(text="y"))])


def test_part_ids_match_decompose():
    plan = chain3()
    predicted = part_ids(plan, "v", 2)
    out = decompose_node(plan, "v", [
        ("x", PromptSpec(text="1")), ("y", PromptSpec(text="2")),
    ])
    assert all(p in out.graph.nodes for p in predicted)


# --------------------------------------------------------------------------
# fuse


def test_fuse_merges_clean_seam():
    plan = chain3()
    out = fuse_nodes(plan, "a", "v", PromptSpec(text="merged work"))
    merged = next(n for n in out.graph.nodes if n not in ("c",))
    assert out.graph.nodes[merged].kind is NodeKind.LLM
    assert (merged, "c") in out.graph.edges
    assert len(out.graph.nodes) == 2
    assert validate_plan(out).ok


def test_fuse_preconditions():
    plan = chain3()
    with pytest.raises(TransformError, match="no edge"):
        fuse_nodes(plan, "a", "c", PromptSpec(text="m"))

    diamond = build_plan(
        nodes=[llm("s"), llm("x"), llm("y"), llm("t")],
        edges=[("s", "x"), ("s", "y"), ("x", "t"), ("y", "t")],
        prompts={n: PromptSpec(text=n) for n in "sxyt"},
    )
    with pytest.raises(TransformError, match="in-edges"):
        fuse_nodes(diamond, "x", "t", PromptSpec(text="m"))
    with pytest.raises(TransformError, match="out-edges"):
        fuse_nodes(diamond, "s", "x", PromptSpec(text="m"))


def test_decompose_then_fuse_restores_topology():
    plan = chain3()
    split = decompose_node(plan, "v", [
        ("p1", PromptSpec(text="one")), ("p2", PromptSpec(text="two")),
    ])
    fused = fuse_nodes(split, "v_p1", "v_p2", plan.prompts["v"])
    assert len(fused.graph.nodes) == len(plan.graph.nodes)
    assert len(fused.graph.edges) == len(plan.graph.edges)
    merged = next(n for n in fused.graph.nodes if n not in plan.graph.nodes)
    # same shape: a -> merged -> c
    assert ("a", merged) in fused.graph.edges
    assert (merged, "c") in fused.graph.edges
    assert validate_plan(fused).ok


def test_should_fuse_thresholds():
    assert should_fuse(0.125, 0.125, 0.75, 0.75, eps_cost=0.25)
    assert not should_fuse(0.50, 0.125, 0.75, 0.75, eps_cost=0.25)
    assert should_fuse(0.125, 0.125, 0.75, 0.78125, eps_cost=0.25, acc_tol=0.03125)
    assert not should_fuse(0.125, 0.125, 0.75, 0.8125, eps_cost=0.25, acc_tol=0.03125)
    # risk regression exactly equal to eps_cost is not "better": strict <
    assert not should_fuse(0.375, 0.125, 0.75, 0.75, eps_cost=0.25)


# --------------------------------------------------------------------------
# offload


def test_offload_swaps_payload_only():
    plan = build_plan(
        nodes=[llm("p", "parse"), llm("e", "evaluate")],
        edges=[("p", "e")],
        prompts={"p": PromptSpec(text="parse"), "e": PromptSpec(text="add")},
    )
    artifact = CodeArtifact(program="parse_json(p).a + parse_json(p).b", inputs=("p",))
    out = offload_node(plan, "e", artifact)
    assert out.graph.nodes["e"].kind is NodeKind.CODE
    assert out.graph.edges == plan.graph.edges
    assert "e" not in out.prompts
    assert out.code["e"] is artifact
    assert validate_plan(out).ok


def test_offload_rejects_bad_inputs_and_code_nodes():
    plan = chain3()
    with pytest.raises(TransformError, match="invalid plan"):
        offload_node(plan, "v", CodeArtifact(program="ghost + 1", inputs=("ghost",)))
    offloaded = offload_node(plan, "v", CodeArtifact(program="extract_answer(a)", inputs=("a",)))
    with pytest.raises(TransformError, match="model nodes only"):
        offload_node(offloaded, "v", CodeArtifact(program="task"))


# --------------------------------------------------------------------------
# consensus


def three_prompts(base: str = "Solve it carefully.") -> list[PromptSpec]:
    return [
        PromptSpec(text=base, perturbation=f"(approach {i})", temperature=0.3 * i)
        for i in (1, 2, 3)
    ]


def test_wrap_consensus_shape():
    out = wrap_consensus(mono(), "solve", three_prompts())
    assert len(out.graph.nodes) == len(mono().graph.nodes) + 4
    assert set(out.graph.nodes) == {"solve_in", "solve_r1", "solve_r2", "solve_r3", "solve_vote"}
    for rid in ("solve_r1", "solve_r2", "solve_r3"):
        assert ("solve_in", rid) in out.graph.edges
        assert (rid, "solve_vote") in out.graph.edges
        assert out.graph.nodes[rid].role is RoleTag.SOLVER
    assert out.graph.nodes["solve_vote"].role is RoleTag.VOTE
    assert out.graph.nodes["solve_in"].role is RoleTag.FAN_IN
    assert out.code["solve_vote"].program == "majority_vote([solve_r1, solve_r2, solve_r3])"
    assert validate_plan(out).ok


def test_wrap_consensus_rewires_external_edges():
    out = wrap_consensus(chain3(), "v", three_prompts())
    assert ("a", "v_in") in out.graph.edges
    assert ("v_vote", "c") in out.graph.edges
    assert out.code["v_in"].program == "a"
    assert validate_plan(out).ok


def test_wrap_consensus_preconditions():
    with pytest.raises(TransformError, match="at least 2"):
        wrap_consensus(mono(), "solve", three_prompts()[:1])
    with pytest.raises(TransformError, match="at most 8"):
        wrap_consensus(mono(), "solve", three_prompts() * 4,
                       limits=ValidationLimits(max_fan_out=8))
    # no limits, no fan-out cap
    wide = wrap_consensus(mono(), "solve", three_prompts() * 4, limits=None)
    assert len(wide.graph.nodes) == 14
    mixed = three_prompts()
    mixed[1] = PromptSpec(text="totally different base", perturbation="x")
    with pytest.raises(TransformError, match="share one base prompt"):
        wrap_consensus(mono(), "solve", mixed)


# --------------------------------------------------------------------------
# refine_prompt and edit scripts


def test_refine_prompt_replaces_only_the_prompt():
    plan = mono()
    out = refine_prompt(plan, "solve", PromptSpec(text="Be extremely careful."))
    assert out.prompts["solve"].text == "Be extremely careful."
    assert out.graph.nodes == plan.graph.nodes
    assert plan.prompts["solve"].text == "Solve the task end to end."


def test_edit_script_applies_in_order_without_mutating_input():
    plan = mono()
    before = plan_fingerprint(plan)
    script = {
        "edits": [
            {"op": "decompose", "node": "solve", "parts": [
                {"scope": "extract operands", "prompt": {"text": "List operands as JSON."}},
                {"scope": "compute answer", "prompt": {"text": "Add the operands."}},
            ]},
            {"op": "offload", "node": "solve_p2", "code": {
                "program": "parse_json(solve_p1).a + parse_json(solve_p1).b",
                "inputs": ["solve_p1"],
                "output_type": "number",
            }},
            {"op": "refine_prompt", "node": "solve_p1",
             "prompt": {"text": "List operands as strict JSON only."}},
        ]
    }
    out = apply_edit_script(plan, script)
    assert out.graph.nodes["solve_p2"].kind is NodeKind.CODE
    assert out.prompts["solve_p1"].text == "List operands as strict JSON only."
    assert plan_fingerprint(plan) == before
    assert validate_plan(out).ok


def test_edit_script_consensus_and_fuse_ops():
    consensus = apply_edit_script(mono(), [
        {"op": "consensus", "node": "solve",
         "prompts": [{"text": "Solve.", "perturbation": p, "temperature": t}
                     for p, t in (("a", 0.2), ("b", 0.6), ("c", 1.0))],
         "vote": None},
    ])
    assert "solve_vote" in consensus.graph.nodes

    fused = apply_edit_script(chain3(), [
        {"op": "fuse", "first": "a", "second": "v", "prompt": {"text": "merged"}},
    ])
    assert len(fused.graph.nodes) == 2


def test_edit_script_rejects_unknown_ops_and_bad_shapes():
    with pytest.raises(Exception, match="unknown edit op"):
        apply_edit_script(mono(), [{"op": "teleport", "node": "solve"}])
    with pytest.raises(Exception, match="node id"):
        apply_edit_script(mono(), [{"op": "refine_prompt", "prompt": {"text": "x"}}])
    with pytest.raises(Exception, match="edit script"):
        apply_edit_script(mono(), {"not_edits": []})


# --------------------------------------------------------------------------
# randomized safety: every applicable rewrite yields a valid plan


def _applicable_rewrites(plan, rng):
    out = []
    ident = lambda s: s.isidentifier()
    for node_id in sorted(plan.graph.nodes):
        node = plan.graph.nodes[node_id]
        if node.kind is not NodeKind.LLM:
            continue
        out.append(("refine", node_id))
        out.append(("decompose", node_id))
        preds = plan.graph.predecessors(node_id)
        if all(ident(p) for p in preds):
            out.append(("consensus", node_id))
            out.append(("offload", node_id))
    for a, b in sorted(plan.graph.edges):
        if (plan.graph.nodes[a].kind is NodeKind.LLM
                and plan.graph.nodes[b].kind is NodeKind.LLM
                and plan.graph.predecessors(b) == [a]
                and plan.graph.successors(a) == [b]):
            out.append(("fuse", (a, b)))
    return out


def _apply(plan, rewrite, rng):
    kind, target = rewrite
    if kind == "refine":
        return refine_prompt(plan, target, PromptSpec(text=f"refined {rng.randrange(999)}"))
    if kind == "decompose":
        k = rng.randint(1, 3)
        return decompose_node(plan, target, [
            (f"part {i}", PromptSpec(text=f"do part {i}")) for i in range(k)
        ])
    if kind == "consensus":
        return wrap_consensus(plan, target, three_prompts())
    if kind == "offload":
        preds = plan.graph.predecessors(target)
        if preds:
            p = rng.choice(preds)
            artifact = CodeArtifact(program=f"text({p})", inputs=(p,),
                                    output_type=OutputType.TEXT)
        else:
            artifact = CodeArtifact(program="task", output_type=OutputType.TEXT)
        return offload_node(plan, target, artifact)
    if kind == "fuse":
        a, b = target
        return fuse_nodes(plan, a, b, PromptSpec(text="merged"))
    raise AssertionError(kind)


def test_1000_randomized_rewrites_keep_plans_valid():
    rng = random.Random(777)
    applications = 0
    plan = make_random_plan(rng)
    while applications < 1000:
        rewrites = _applicable_rewrites(plan, rng)
        if not rewrites or len(plan.graph.nodes) > 40 or rng.random() < 0.15:
            plan = make_random_plan(rng)
            continue
        rewrite = rewrites[rng.randrange(len(rewrites))]
        plan = _apply(plan, rewrite, rng)
        report = validate_plan(plan, limits=None)
        assert report.ok, (rewrite, report.summary())
        applications += 1
