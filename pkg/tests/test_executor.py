"""Forward-pass behavior: tracing, extraction points, isolation, replay."""

from __future__ import annotations

from fractions import Fraction

import pytest

from flowc.executor import (
    ExecutionTrace,
    StudentCall,
    StudentError,
    StudentReply,
    TaskSample,
    TraceStatus,
    compose_prompt,
    mock_token_cost,
    read_traces_jsonl,
    run_batch,
    run_task,
    write_traces_jsonl,
)
from flowc.plan import (
    CodeArtifact,
    Node,
    NodeKind,
    OutputType,
    PromptSpec,
    RoleTag,
    build_plan,
)


TASK = TaskSample(
    task_id="t0",
    prompt_text="Jamal starts with 55 points, wins 25, then finds 10 more. Total?",
    gold_answer=90,
)


def code_only_plan():
    return build_plan(
        nodes=[Node(id="total", kind=NodeKind.CODE, scope="fixed sum",
                    role=RoleTag.EVAL)],
        edges=[],
        code={"total": CodeArtifact(program="55 + 25 + 10")},
    )


def consensus_plan(vote_program="majority_vote([r1, r2, r3])"):
    nodes = [
        Node(id="fan", kind=NodeKind.CODE, scope="broadcast", role=RoleTag.FAN_IN),
        Node(id="r1", kind=NodeKind.LLM, scope="solve", role=RoleTag.SOLVER),
        Node(id="r2", kind=NodeKind.LLM, scope="solve", role=RoleTag.SOLVER),
        Node(id="r3", kind=NodeKind.LLM, scope="solve", role=RoleTag.SOLVER),
        Node(id="vote", kind=NodeKind.CODE, scope="majority", role=RoleTag.VOTE),
    ]
    edges = [("fan", "r1"), ("fan", "r2"), ("fan", "r3"),
             ("r1", "vote"), ("r2", "vote"), ("r3", "vote")]
    prompts = {r: PromptSpec(text="Solve it. End with the final number.")
               for r in ("r1", "r2", "r3")}
    code = {
        "fan": CodeArtifact(program="task", output_type=OutputType.TEXT),
        "vote": CodeArtifact(program=vote_program, inputs=("r1", "r2", "r3")),
    }
    return build_plan(nodes=nodes, edges=edges, prompts=prompts, code=code)


class CountingStudent:
    def __init__(self, outputs):
        self.outputs = dict(outputs)
        self.calls: list[StudentCall] = []

    def complete(self, call: StudentCall) -> StudentReply:
        self.calls.append(call)
        text = self.outputs[call.node_id]
        return StudentReply(text=text, token_cost=mock_token_cost(text))


def test_code_only_plan_runs_without_a_student():
    student = CountingStudent({})
    trace = run_task(code_only_plan(), TASK, student)
    assert trace.ok
    assert trace.final_answer == 90
    assert student.calls == []
    assert trace.records[0].token_cost == 0


def test_consensus_majority_and_fallback_votes():
    student = CountingStudent({
        "r1": "I get 90.\nFinal answer: 90",
        "r2": "Recount says 90.",
        "r3": "Something odd: 10",
    })
    trace = run_task(consensus_plan(), TASK, student)
    assert trace.ok and trace.final_answer == 90

    # No strict majority: the vote falls back to the smallest answer.
    student = CountingStudent({
        "r1": "Final answer: 100",
        "r2": "Final answer: 10",
        "r3": "Final answer: 90",
    })
    trace = run_task(consensus_plan(), TASK, student)
    assert trace.ok and trace.final_answer == 10


def test_solver_outputs_feeding_a_vote_arrive_as_numbers():
    student = CountingStudent({
        "r1": "prose then 90", "r2": "prose then 90", "r3": "prose then 10",
    })
    trace = run_task(consensus_plan(), TASK, student)
    by_node = {r.node_id: r for r in trace.records}
    assert by_node["r1"].parsed_output == 90
    assert by_node["r3"].parsed_output == 10
    assert by_node["vote"].inputs == {"r1": 90, "r2": 90, "r3": 10}


def test_records_follow_topology_and_inputs_match_predecessors():
    student = CountingStudent({
        "r1": "Final answer: 90", "r2": "Final answer: 90", "r3": "Final answer: 90",
    })
    trace = run_task(consensus_plan(), TASK, student)
    order = [r.node_id for r in trace.records]
    assert order == ["fan", "r1", "r2", "r3", "vote"]
    by_node = {r.node_id: r for r in trace.records}
    assert by_node["r1"].inputs == {"fan": TASK.prompt_text}
    # The replica prompts carry the broadcast input by name.
    replica_call = next(c for c in student.calls if c.node_id == "r1")
    assert "Input fan:" in replica_call.prompt_text
    assert TASK.prompt_text in replica_call.prompt_text


def test_layer_parallelism_changes_nothing():
    outputs = {"r1": "Final answer: 70", "r2": "Final answer: 90",
               "r3": "Final answer: 90"}
    sequential = run_task(consensus_plan(), TASK, CountingStudent(outputs))
    parallel = run_task(consensus_plan(), TASK, CountingStudent(outputs),
                        node_parallelism=4)
    assert parallel.final_answer == sequential.final_answer
    assert [r.node_id for r in parallel.records] == \
        [r.node_id for r in sequential.records]
    assert [r.parsed_output for r in parallel.records] == \
        [r.parsed_output for r in sequential.records]


def test_student_failure_marks_the_trace_and_skips_descendants():
    class FailingStudent:
        def complete(self, call):
            if call.node_id == "r2":
                raise StudentError("backend offline")
            return StudentReply(text="Final answer: 90", token_cost=1)

    trace = run_task(consensus_plan(), TASK, FailingStudent())
    assert trace.status is TraceStatus.NODE_ERROR
    assert trace.error_node == "r2"
    assert "offline" in trace.error_reason
    assert trace.final_answer is None
    executed = {r.node_id for r in trace.records}
    assert "vote" not in executed
    assert "fan" in executed


def test_extraction_failure_at_the_sink_is_a_node_error():
    plan = build_plan(
        nodes=[Node(id="solve", kind=NodeKind.LLM, scope="solve",
                    role=RoleTag.SOLVER)],
        edges=[],
        prompts={"solve": PromptSpec(text="Solve.")},
    )
    student = CountingStudent({"solve": "I cannot find any quantity."})
    trace = run_task(plan, TASK, student)
    assert trace.status is TraceStatus.NODE_ERROR
    assert trace.error_node == "solve"
    assert trace.records == ()


def test_compose_prompt_layout_is_stable():
    plan = consensus_plan()
    text = compose_prompt(plan, "r1", TASK, {"b": "two", "a": "one"})
    assert text.startswith("Solve it. End with the final number.")
    assert text.index("Input a:\none") < text.index("Input b:\ntwo")
    assert f"Task:\n{TASK.prompt_text}" in text

    spiced = PromptSpec(text="Solve.", perturbation="Carefully.")
    plan2 = build_plan(
        nodes=[Node(id="s", kind=NodeKind.LLM, scope="solve", role=RoleTag.SOLVER)],
        edges=[], prompts={"s": spiced},
    )
    text2 = compose_prompt(plan2, "s", TASK, {})
    assert text2.split("\n\n")[:2] == ["Solve.", "Carefully."]


def test_batch_preserves_order_and_isolates_failures():
    plan = build_plan(
        nodes=[Node(id="solve", kind=NodeKind.LLM, scope="solve",
                    role=RoleTag.SOLVER)],
        edges=[],
        prompts={"solve": PromptSpec(text="Solve.")},
    )
    tasks = [
        TaskSample(task_id=f"t{i}", prompt_text=f"Count to {i}.", gold_answer=i)
        for i in range(3)
    ]

    class PerTaskStudent:
        def complete(self, call):
            if call.task_id == "t1":
                return StudentReply(text="no digits at all", token_cost=1)
            return StudentReply(text=f"Final answer: {call.task_id[1:]}",
                                token_cost=1)

    traces = run_batch(plan, tasks, PerTaskStudent(), task_parallelism=3)
    assert [t.task_id for t in traces] == ["t0", "t1", "t2"]
    assert [t.ok for t in traces] == [True, False, True]
    assert traces[2].final_answer == 2

    assert run_batch(plan, [], PerTaskStudent()) == []


def test_traces_round_trip_through_jsonl(tmp_path):
    student = CountingStudent({
        "r1": "Final answer: 90", "r2": "Final answer: 90",
        "r3": "Final answer: 10",
    })
    traces = [run_task(consensus_plan(), TASK, student)]
    plan = build_plan(
        nodes=[Node(id="solve", kind=NodeKind.LLM, scope="solve",
                    role=RoleTag.SOLVER)],
        edges=[], prompts={"solve": PromptSpec(text="Solve.")},
    )
    traces.append(run_task(plan, TASK, CountingStudent({"solve": "nothing"})))
    halving = build_plan(
        nodes=[Node(id="half", kind=NodeKind.CODE, scope="non-integer result",
                    role=RoleTag.EVAL)],
        edges=[],
        code={"half": CodeArtifact(program="1 / 2")},
    )
    traces.append(run_task(halving, TASK, CountingStudent({})))
    path = tmp_path / "traces.jsonl"
    write_traces_jsonl(path, traces)
    loaded = read_traces_jsonl(path)
    assert len(loaded) == 3
    for original, copy in zip(traces, loaded):
        assert copy.task_id == original.task_id
        assert copy.status is original.status
        assert copy.final_answer == original.final_answer
        assert copy.error_node == original.error_node
        assert [r.node_id for r in copy.records] == \
            [r.node_id for r in original.records]
        assert [r.parsed_output for r in copy.records] == \
            [r.parsed_output for r in original.records]
    assert loaded[2].final_answer == Fraction(1, 2)
    assert isinstance(loaded[2].final_answer, Fraction)


def test_scripted_replay_is_deterministic_modulo_wall_time():
    outputs = {"r1": "Final answer: 90", "r2": "Final answer: 90",
               "r3": "Final answer: 10"}
    first = run_task(consensus_plan(), TASK, CountingStudent(outputs))
    second = run_task(consensus_plan(), TASK, CountingStudent(outputs))
    strip = lambda t: [
        (r.node_id, r.inputs, r.raw_output, r.parsed_output, r.token_cost)
        for r in t.records
    ]
    assert strip(first) == strip(second)
    assert first.final_answer == second.final_answer
