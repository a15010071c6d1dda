"""Shared random generators for plan and transform property tests."""

from __future__ import annotations

import random

from flowc.plan import (
    CodeArtifact,
    ExecutionPlan,
    Node,
    NodeKind,
    OutputType,
    PromptSpec,
    RoleTag,
    build_plan,
)

_ROLES = list(RoleTag)


def make_random_plan(rng: random.Random, max_nodes: int = 8) -> ExecutionPlan:
    """A structurally valid random plan: single source, single sink,
    forward edges only, payloads matching node kinds."""
    count = rng.randint(1, max_nodes)
    ids = [f"n{i}" for i in range(count)]
    edges: set[tuple[str, str]] = set()
    for i in range(1, count):
        edges.add((ids[rng.randrange(i)], ids[i]))
        # occasional extra forward edge for diamonds
        if i >= 2 and rng.random() < 0.3:
            edges.add((ids[rng.randrange(i)], ids[i]))
    # every non-final node must reach the sink
    for i in range(count - 1):
        if not any(a == ids[i] for a, _ in edges):
            edges.add((ids[i], ids[-1]))

    nodes: list[Node] = []
    prompts: dict[str, PromptSpec] = {}
    code: dict[str, CodeArtifact] = {}
    for i, node_id in enumerate(ids):
        preds = sorted(a for a, b in edges if b == node_id)
        make_code = count > 1 and rng.random() < 0.4
        if make_code:
            if preds and rng.random() < 0.7:
                bound = preds[rng.randrange(len(preds))]
                artifact = CodeArtifact(
                    program=f"text({bound})", inputs=(bound,), output_type=OutputType.TEXT
                )
            else:
                artifact = CodeArtifact(program="task", inputs=(), output_type=OutputType.TEXT)
            nodes.append(Node(id=node_id, kind=NodeKind.CODE,
                              scope=f"step {i}", role=rng.choice(_ROLES)))
            code[node_id] = artifact
        else:
            nodes.append(Node(id=node_id, kind=NodeKind.LLM,
                              scope=f"step {i}", role=rng.choice(_ROLES)))
            prompts[node_id] = PromptSpec(
                text=f"Do step {i} of the task.",
                perturbation=None if rng.random() < 0.5 else f"variant {rng.randrange(9)}",
                temperature=round(rng.random() * 2, 2),
            )
    return build_plan(nodes, edges, prompts, code, plan_id=f"rand-{rng.randrange(10**6)}")
