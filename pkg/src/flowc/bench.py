"""Synthetic task families and the desk-scale experiment suite.

Tasks come from parametric narrative templates whose gold answers are
computed (and re-verified) through the expression language, so every
dataset is deterministic given a seed and disjoint between train and
test splits. The experiments run entirely against the simulated
backends: an architecture comparison (monolithic baseline, a
refinement-only search, the full compiling search), a training-batch
size sweep, a mixed-family interference study, and a scripted replay of
two saved consensus plans on one fixture task.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass
from pathlib import Path
from random import Random
from typing import Mapping, Sequence

from .agents import (
    FamilyBlueprint,
    NoisyStudent,
    RuleBasedTeacher,
    ScriptedStudent,
    SubtaskErrorProfile,
)
from .executor import Student, TaskSample, run_batch, run_task
from .optimizer import ActionKind, OptimizerConfig, optimize
from .plan import (
    CodeArtifact,
    ExecutionPlan,
    Node,
    NodeKind,
    OutputType,
    PromptSpec,
    RoleTag,
    build_plan,
)
from .risk import batch_risk


class ExperimentError(RuntimeError):
    """An experiment postcondition or dataset invariant failed."""


# --------------------------------------------------------------------------
# Task templates


@dataclass(frozen=True)
class TaskTemplate:
    """A narrative pattern with numeric slots and an answer formula.

    The pattern must mention each slot exactly once, in slot order, and
    the rendered text may state no other numerals: the simulated student
    and the rule-based critic both recover operands positionally.
    """

    family_tag: str
    pattern: str
    slots: tuple[str, ...]
    ranges: Mapping[str, tuple[int, int]]
    formula: str

    def __post_init__(self) -> None:
        blueprint = self.blueprint()  # validates slots and formula
        last = -1
        for slot in blueprint.slots:
            marker = "{" + slot + "}"
            if self.pattern.count(marker) != 1:
                raise ValueError(f"pattern must mention {{{slot}}} exactly once")
            position = self.pattern.index(marker)
            if position < last:
                raise ValueError("pattern must mention slots in slot order")
            last = position
        for slot in self.slots:
            if slot not in self.ranges:
                raise ValueError(f"slot {slot!r} has no range")
            low, high = self.ranges[slot]
            if low > high:
                raise ValueError(f"slot {slot!r} has an empty range")

    def blueprint(self) -> FamilyBlueprint:
        return FamilyBlueprint(slots=self.slots, formula=self.formula)

    def instantiate(self, values: Mapping[str, int], task_id: str) -> TaskSample:
        text = self.pattern.format(**{s: values[s] for s in self.slots})
        gold = self.blueprint().evaluate(values)
        recovered = self.blueprint().operands(text)
        if recovered != {s: values[s] for s in self.slots}:
            raise ExperimentError(
                f"template {self.family_tag!r} rendered text that does not "
                f"round-trip its slot values: {recovered} != {dict(values)}"
            )
        return TaskSample(task_id=task_id, prompt_text=text, gold_answer=gold,
                          family_tag=self.family_tag)


GIFT_TEMPLATE = TaskTemplate(
    family_tag="gift-sum",
    pattern=("For his birthday, Jamal received a cash gift sufficient to buy "
             "one {a}-dollar video game and one {b}-dollar controller with "
             "{c} dollars left over. How many dollars did Jamal receive?"),
    slots=("a", "b", "c"),
    ranges={"a": (20, 80), "b": (10, 60), "c": (5, 30)},
    formula="a + b + c",
)

# Same surface shape (three stated quantities, one number out) but an
# incompatible answer formula, for the interference experiment: gold
# answers live in [4001, 81009], disjoint from the gift family's range.
CRATE_TEMPLATE = TaskTemplate(
    family_tag="crate-product",
    pattern=("A warehouse packs {a} crates with {b} thousand widgets in each "
             "crate and sets aside {c} spare widgets. How many widgets are "
             "there in total?"),
    slots=("a", "b", "c"),
    ranges={"a": (2, 9), "b": (2, 9), "c": (1, 9)},
    formula="a * b * 1000 + c",
)


def generate_tasks(template: TaskTemplate, count: int, seed: int) -> list[TaskSample]:
    """Deterministic task list; every gold answer is re-verified."""
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = Random(f"{template.family_tag}|{seed}")
    tasks = []
    for i in range(count):
        values = {s: rng.randint(*template.ranges[s]) for s in template.slots}
        task = template.instantiate(
            values, task_id=f"{template.family_tag}-{seed}-{i:04d}"
        )
        if task.gold_answer != template.blueprint().answer(task.prompt_text):
            raise ExperimentError(f"gold answer failed re-verification: {task}")
        tasks.append(task)
    return tasks


def _ensure_disjoint(train: Sequence[TaskSample], test: Sequence[TaskSample]) -> None:
    overlap = {t.task_id for t in train} & {t.task_id for t in test}
    if overlap:
        raise ExperimentError(f"train/test task ids overlap: {sorted(overlap)}")


# --------------------------------------------------------------------------
# Experiment configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Shared knobs for the three experiments.

    ``templates`` lists the task families in play; the first is the
    primary family, and the mixed experiment needs exactly two. The error
    probabilities configure the simulated student; three independent
    repetitions with derived seeds mirror a small error-bar protocol.
    """

    templates: tuple[TaskTemplate, ...] = (GIFT_TEMPLATE,)
    seed: int = 0
    runs: int = 3
    train_size: int = 10
    test_size: int = 30
    m_values: tuple[int, ...] = (3, 5, 10)
    max_epochs: int = 8
    epsilon: float = 0.0
    arithmetic_error_p: float = 0.5
    parse_error_p: float = 0.0
    task_parallelism: int = 1

    def __post_init__(self) -> None:
        if not self.templates:
            raise ValueError("at least one task template is required")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if self.train_size < 1 or self.test_size < 1:
            raise ValueError("train_size and test_size must be at least 1")
        if any(m < 1 for m in self.m_values):
            raise ValueError("every training batch size must be at least 1")

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            epsilon=self.epsilon,
            max_epochs=self.max_epochs,
            task_parallelism=self.task_parallelism,
        )

    def profile(self) -> SubtaskErrorProfile:
        return SubtaskErrorProfile(
            arithmetic_error_p=self.arithmetic_error_p,
            parse_error_p=self.parse_error_p,
        )


def monolithic_plan(plan_id: str = "monolithic") -> ExecutionPlan:
    """The starting point everywhere: one model node does everything."""
    return build_plan(
        nodes=[Node(id="solve", kind=NodeKind.LLM, scope="solve the task end to end",
                    role=RoleTag.SOLVER)],
        edges=[],
        prompts={"solve": PromptSpec(
            text="Read the task, work through it, and end with the final number."
        )},
        plan_id=plan_id,
    )


def evaluate_accuracy(plan: ExecutionPlan, tasks: Sequence[TaskSample],
                      student: Student, task_parallelism: int = 1) -> float:
    traces = run_batch(plan, tasks, student, task_parallelism=task_parallelism)
    return 1.0 - batch_risk(traces, [t.gold_answer for t in tasks])


def _plan_shape(plan: ExecutionPlan) -> str:
    llm = sum(1 for n in plan.graph.nodes.values() if n.kind is NodeKind.LLM)
    code = len(plan.graph.nodes) - llm
    return f"{llm}L/{code}C"


# --------------------------------------------------------------------------
# Reports


REPORT_SCHEMA_ID = "flowc-report/1"


@dataclass(frozen=True)
class Report:
    """One tabular result set. Contains no timestamps or wall times, so a
    re-run with the same config serializes byte-identically."""

    name: str
    columns: tuple[str, ...]
    rows: tuple[tuple[object, ...], ...]
    notes: tuple[str, ...] = ()
    meta: tuple[tuple[str, object], ...] = ()

    def __post_init__(self) -> None:
        for row in self.rows:
            if len(row) != len(self.columns):
                raise ValueError("row width does not match columns")


def report_to_jsonable(report: Report) -> dict:
    return {
        "schema": REPORT_SCHEMA_ID,
        "name": report.name,
        "columns": list(report.columns),
        "rows": [list(row) for row in report.rows],
        "notes": list(report.notes),
        "meta": {k: v for k, v in report.meta},
    }


def render_report_json(report: Report) -> str:
    return json.dumps(report_to_jsonable(report), sort_keys=True, indent=2) + "\n"


def render_report_csv(report: Report) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(report.columns)
    for row in report.rows:
        writer.writerow(["" if v is None else v for v in row])
    return buffer.getvalue()


def write_report(report: Report, directory: str | Path) -> tuple[Path, Path]:
    """Write ``<name>.json`` and ``<name>.csv`` under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / f"{report.name}.json"
    csv_path = directory / f"{report.name}.csv"
    json_path.write_text(render_report_json(report), encoding="utf-8")
    csv_path.write_text(render_report_csv(report), encoding="utf-8")
    return json_path, csv_path


def _summary(values: Sequence[float]) -> tuple[float, float, float]:
    return (sum(values) / len(values), min(values), max(values))


def _fmt_runs(values: Sequence[float]) -> str:
    return ";".join(format(v, ".6f") for v in values)


# --------------------------------------------------------------------------
# Experiment 1: architecture comparison


def _run_seeds(cfg: ExperimentConfig, run: int) -> tuple[int, int, int]:
    """(train data seed, test data seed, student seed) for one repetition."""
    rng = Random(f"{cfg.seed}|run{run}")
    return rng.randrange(2 ** 31), rng.randrange(2 ** 31), rng.randrange(2 ** 31)


def run_experiment_architecture(cfg: ExperimentConfig) -> Report:
    """Monolithic baseline vs refinement-only search vs the full search.

    Per repetition, all three arms share the same data and the same
    simulated student. When the baseline actually fails tasks, the full
    arm's mean accuracy must strictly beat it; a violation raises.
    """
    template = cfg.templates[0]
    blueprint = template.blueprint()
    arms: dict[str, list[tuple[float, str, str]]] = {
        "monolithic": [], "refine_only": [], "full_compile": [],
    }
    for run in range(cfg.runs):
        train_seed, test_seed, student_seed = _run_seeds(cfg, run)
        train = generate_tasks(template, cfg.train_size, train_seed)
        test = generate_tasks(template, cfg.test_size, test_seed)
        _ensure_disjoint(train, test)
        student = NoisyStudent(student_seed, {template.family_tag: blueprint},
                               cfg.profile())

        base = monolithic_plan()
        arms["monolithic"].append((
            evaluate_accuracy(base, test, student, cfg.task_parallelism),
            "baseline", _plan_shape(base),
        ))
        for arm, actions in (
            ("refine_only", [ActionKind.PROMPT_REFINE]),
            ("full_compile", None),
        ):
            teacher = RuleBasedTeacher({template.family_tag: blueprint}, train,
                                       actions=actions)
            best, record = optimize(base, train, student, teacher,
                                    config=cfg.optimizer())
            arms[arm].append((
                evaluate_accuracy(best, test, student, cfg.task_parallelism),
                record.outcome.value, _plan_shape(best),
            ))

    rows = []
    for arm, results in arms.items():
        accuracies = [a for a, _, _ in results]
        mean, low, high = _summary(accuracies)
        rows.append((arm, mean, low, high, _fmt_runs(accuracies),
                     ";".join(o for _, o, _ in results),
                     ";".join(s for _, _, s in results)))
    by_arm = {row[0]: row[1] for row in rows}
    if by_arm["monolithic"] < 1.0 and not by_arm["full_compile"] > by_arm["monolithic"]:
        raise ExperimentError(
            "full search failed to beat a fallible baseline: "
            f"{by_arm['full_compile']:.4f} vs {by_arm['monolithic']:.4f}"
        )
    return Report(
        name="architecture",
        columns=("arm", "mean_accuracy", "min_accuracy", "max_accuracy",
                 "per_run", "outcomes", "plan_shapes"),
        rows=tuple(rows),
        notes=(
            f"family={template.family_tag}",
            f"ordering full_compile>monolithic: "
            f"{by_arm['full_compile'] > by_arm['monolithic']}",
        ),
        meta=(("seed", cfg.seed), ("runs", cfg.runs),
              ("train_size", cfg.train_size), ("test_size", cfg.test_size),
              ("arithmetic_error_p", cfg.arithmetic_error_p),
              ("parse_error_p", cfg.parse_error_p)),
    )


# --------------------------------------------------------------------------
# Experiment 2: training batch size sweep

# External reference series for the sweep, carried in the report for
# comparison plots. Reported, never asserted: the simulation makes no
# attempt to reproduce them.
REFERENCE_TEST_ACCURACY = {3: 0.993, 5: 0.913, 10: 0.95}


def run_experiment_samplesize(cfg: ExperimentConfig) -> Report:
    """Test accuracy of the full search per training batch size."""
    template = cfg.templates[0]
    blueprint = template.blueprint()
    rows = []
    for m in cfg.m_values:
        accuracies = []
        outcomes = []
        for run in range(cfg.runs):
            train_seed, test_seed, student_seed = _run_seeds(cfg, run * 1000 + m)
            train = generate_tasks(template, m, train_seed)
            test = generate_tasks(template, cfg.test_size, test_seed)
            _ensure_disjoint(train, test)
            student = NoisyStudent(student_seed, {template.family_tag: blueprint},
                                   cfg.profile())
            teacher = RuleBasedTeacher({template.family_tag: blueprint}, train)
            best, record = optimize(monolithic_plan(), train, student, teacher,
                                    config=cfg.optimizer())
            accuracies.append(
                evaluate_accuracy(best, test, student, cfg.task_parallelism)
            )
            outcomes.append(record.outcome.value)
        mean, low, high = _summary(accuracies)
        rows.append((m, mean, statistics.pstdev(accuracies), low, high,
                     _fmt_runs(accuracies), ";".join(outcomes),
                     REFERENCE_TEST_ACCURACY.get(m)))
    return Report(
        name="samplesize",
        columns=("m", "mean_accuracy", "std_accuracy", "min_accuracy",
                 "max_accuracy", "per_run", "outcomes", "reference_accuracy"),
        rows=tuple(rows),
        notes=("reference_accuracy is an external comparison series, "
               "not an assertion",
               f"test_size={cfg.test_size} is a default choice, "
               "not an externally fixed value"),
        meta=(("seed", cfg.seed), ("runs", cfg.runs),
              ("test_size", cfg.test_size),
              ("arithmetic_error_p", cfg.arithmetic_error_p),
              ("parse_error_p", cfg.parse_error_p)),
    )


# --------------------------------------------------------------------------
# Experiment 3: mixed-family interference


def _interleave(first: Sequence[TaskSample],
                second: Sequence[TaskSample]) -> list[TaskSample]:
    out = []
    for a, b in zip(first, second):
        out.extend((a, b))
    return out


def run_experiment_mixed(cfg: ExperimentConfig) -> Report:
    """Per-family searches vs one search over a 50/50 mixed batch.

    The two families demand different compiled programs at the same plan
    position, so the mixed run cannot reach zero risk: its best plan
    serves one family and fails the other.
    """
    if len(cfg.templates) != 2:
        raise ValueError("the mixed experiment needs exactly two templates")
    first, second = cfg.templates
    if first.family_tag == second.family_tag:
        raise ValueError("the two templates must have distinct family tags")
    blueprints = {t.family_tag: t.blueprint() for t in cfg.templates}
    half_train = max(1, cfg.train_size // 2)
    half_test = max(1, cfg.test_size // 2)

    arms: dict[str, list[tuple[float, str, str]]] = {
        f"{first.family_tag}-only": [],
        f"{second.family_tag}-only": [],
        "mixed": [],
    }
    for run in range(cfg.runs):
        train_seed, test_seed, student_seed = _run_seeds(cfg, run)
        student = NoisyStudent(student_seed, blueprints, cfg.profile())
        splits = {
            template.family_tag: (
                generate_tasks(template, half_train, train_seed),
                generate_tasks(template, half_test, test_seed),
            )
            for template in cfg.templates
        }
        for template in cfg.templates:
            train, test = splits[template.family_tag]
            _ensure_disjoint(train, test)
            teacher = RuleBasedTeacher(blueprints, train)
            best, record = optimize(monolithic_plan(), train, student, teacher,
                                    config=cfg.optimizer())
            arms[f"{template.family_tag}-only"].append((
                evaluate_accuracy(best, test, student, cfg.task_parallelism),
                record.outcome.value, _plan_shape(best),
            ))
        mixed_train = _interleave(splits[first.family_tag][0],
                                  splits[second.family_tag][0])
        mixed_test = _interleave(splits[first.family_tag][1],
                                 splits[second.family_tag][1])
        _ensure_disjoint(mixed_train, mixed_test)
        teacher = RuleBasedTeacher(blueprints, mixed_train)
        best, record = optimize(monolithic_plan(), mixed_train, student, teacher,
                                config=cfg.optimizer())
        arms["mixed"].append((
            evaluate_accuracy(best, mixed_test, student, cfg.task_parallelism),
            record.outcome.value, _plan_shape(best),
        ))

    rows = []
    for arm, results in arms.items():
        accuracies = [a for a, _, _ in results]
        mean, low, high = _summary(accuracies)
        rows.append((arm, mean, low, high, _fmt_runs(accuracies),
                     ";".join(o for _, o, _ in results),
                     ";".join(s for _, _, s in results)))
    by_arm = {row[0]: row[1] for row in rows}
    single_means = [by_arm[f"{t.family_tag}-only"] for t in cfg.templates]
    return Report(
        name="mixed",
        columns=("arm", "mean_accuracy", "min_accuracy", "max_accuracy",
                 "per_run", "outcomes", "plan_shapes"),
        rows=tuple(rows),
        notes=(
            f"families={first.family_tag},{second.family_tag}",
            f"mixed_below_each_single: "
            f"{all(by_arm['mixed'] < m for m in single_means)}",
        ),
        meta=(("seed", cfg.seed), ("runs", cfg.runs),
              ("train_size", cfg.train_size), ("test_size", cfg.test_size),
              ("arithmetic_error_p", cfg.arithmetic_error_p),
              ("parse_error_p", cfg.parse_error_p)),
    )


# --------------------------------------------------------------------------
# Scripted replay of the two saved consensus plans
#
# One fixture task, two three-solver voting plans, and canned solver
# outputs. The homogeneous plan's solvers agree on 90. The specialized
# plan's solvers split [100, 10, 90]: one over-applies its drilled rule,
# one derives the right answer but formats it so the extractor returns a
# subtotal, one is plain and correct; with no majority the vote takes the
# smallest value, so the plan returns 10.


def appendix_task() -> TaskSample:
    return GIFT_TEMPLATE.instantiate({"a": 55, "b": 25, "c": 10},
                                     task_id="gift-fixture-0000")


def _consensus_plan(plan_id: str, solver_ids: Sequence[str],
                    prompts: Mapping[str, PromptSpec]) -> ExecutionPlan:
    nodes = [Node(id="v_in", kind=NodeKind.CODE, scope="broadcast the task",
                  role=RoleTag.FAN_IN)]
    edges = []
    for sid in solver_ids:
        nodes.append(Node(id=sid, kind=NodeKind.LLM, scope="solve the task",
                          role=RoleTag.SOLVER))
        edges.append(("v_in", sid))
        edges.append((sid, "v_vote"))
    nodes.append(Node(id="v_vote", kind=NodeKind.CODE,
                      scope="majority vote over the solvers", role=RoleTag.VOTE))
    code = {
        "v_in": CodeArtifact(program="task", output_type=OutputType.TEXT),
        "v_vote": CodeArtifact(
            program="majority_vote([" + ", ".join(solver_ids) + "])",
            inputs=tuple(solver_ids),
        ),
    }
    return build_plan(nodes=nodes, edges=edges, prompts=dict(prompts),
                      code=code, plan_id=plan_id)


_HOMOGENEOUS_PROMPT = (
    "List the price of each item, add them into the total cost, note the "
    "amount left over, and report the money received as total cost plus "
    "leftover. End with the final number."
)


def homogeneous_plan() -> ExecutionPlan:
    """Three identical solvers, decorrelated only by temperature."""
    prompts = {
        sid: PromptSpec(text=_HOMOGENEOUS_PROMPT, temperature=t)
        for sid, t in (("s1", 0.2), ("s2", 0.5), ("s3", 0.8))
    }
    return _consensus_plan("homogeneous-consensus", ("s1", "s2", "s3"), prompts)


def specialized_plan() -> ExecutionPlan:
    """Three role-specialized solvers with distinct output formats."""
    prompts = {
        "s1_formula": PromptSpec(text=(
            'Apply the rule "money received = total cost + leftover" in '
            'numbered "### Step" sections. End with the final number.'
        )),
        "s2_verify": PromptSpec(text=(
            "Define P as the money received and T as the total cost, solve "
            "P - T = leftover, verify it, then summarize the quantities "
            'under "####" subheadings.'
        )),
        "s3_simple": PromptSpec(text=(
            "Explain the answer in plain sentences, ending with the total "
            "money received."
        )),
    }
    return _consensus_plan(
        "specialized-consensus", ("s1_formula", "s2_verify", "s3_simple"), prompts
    )


_HOMOGENEOUS_OUTPUT = (
    "The game costs 55 dollars and the controller costs 25 dollars, so the "
    "items total 80 dollars. With 10 dollars left over, the gift was "
    "80 + 10 = 90."
)

_SPECIALIZED_OUTPUTS = {
    # Over-applies its drilled rule: adds the leftover a second time.
    "s1_formula": (
        "### Step 1: Total cost\n"
        "The game is 55 and the controller is 25, so the total cost is 80.\n"
        "### Step 2: Apply the rule\n"
        "Money received = total cost + leftover = 80 + 10 = 90.\n"
        "### Step 3: Account for the leftover\n"
        "Adding the 10 left over on top gives 100."
    ),
    # Derives 90 in the body, but its final "####" subheading makes the
    # extractor return the leftover subtotal instead.
    "s2_verify": (
        "Let P be the money received and T the total cost.\n"
        "T = 55 + 25 = 80. P - T = 10, so P = 80 + 10 = 90.\n"
        "Check: 90 - 80 = 10, which matches the leftover.\n"
        "#### Item Costs: 80\n"
        "#### Change Received: 10"
    ),
    "s3_simple": (
        "The game and the controller together cost 55 + 25 = 80 dollars. "
        "Money given = 80 + 10 = 90."
    ),
}

# The number each solver's reasoning arrives at in the body of its
# output, independent of what the extractor later returns.
_DERIVED = {
    "s1": 90, "s2": 90, "s3": 90,
    "s1_formula": 100, "s2_verify": 90, "s3_simple": 90,
}


def appendix_student() -> ScriptedStudent:
    outputs: dict[tuple[str, str] | str, str] = {
        sid: _HOMOGENEOUS_OUTPUT for sid in ("s1", "s2", "s3")
    }
    outputs.update(_SPECIALIZED_OUTPUTS)
    return ScriptedStudent(outputs)


def replay_appendix() -> Report:
    """Run both saved plans on the fixture task and tabulate the votes."""
    task = appendix_task()
    student = appendix_student()
    rows = []
    finals = {}
    for plan in (homogeneous_plan(), specialized_plan()):
        trace = run_task(plan, task, student)
        if not trace.ok:
            raise ExperimentError(
                f"fixture replay failed at {trace.error_node}: {trace.error_reason}"
            )
        records = {r.node_id: r for r in trace.records}
        for sid in plan.code["v_vote"].inputs:
            rows.append((plan.plan_id, sid, _DERIVED[sid],
                         records[sid].parsed_output))
        rows.append((plan.plan_id, "v_vote", None, trace.final_answer))
        finals[plan.plan_id] = trace.final_answer
    return Report(
        name="replay",
        columns=("plan", "node", "derived", "parsed"),
        rows=tuple(rows),
        notes=(
            f"homogeneous final answer: {finals['homogeneous-consensus']}",
            f"specialized final answer: {finals['specialized-consensus']}",
            f"gold answer: {task.gold_answer}",
        ),
    )
