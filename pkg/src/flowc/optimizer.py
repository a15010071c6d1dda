"""Greedy plan search driven by teacher critiques.

One optimization epoch runs the current best plan on the training batch,
asks the teacher to read the traces and name the faulty nodes, asks it
again for a rewritten candidate, evaluates the candidate, and keeps it
only on a strict risk improvement. The loop stops as soon as the risk
reaches the acceptance threshold or the epoch budget runs out.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Protocol, Sequence

from .executor import ExecutionTrace, Student, TaskSample, run_batch
from .plan import ExecutionPlan, InvalidPlanError, plan_fingerprint, validate_plan
from .risk import DEFAULT_LOSS, LossConfig, batch_risk

if TYPE_CHECKING:
    from .agents import TeacherBackend


class FailureKind(str, Enum):
    ARITHMETIC = "arithmetic"
    PARSING = "parsing"
    FORMATTING = "formatting"
    VARIANCE = "variance"
    CONTEXT_BLOAT = "context_bloat"
    OTHER = "other"


class ActionKind(str, Enum):
    PROMPT_REFINE = "prompt_refine"
    OFFLOAD = "offload"
    CONSENSUS = "consensus"
    DECOMPOSE = "decompose"
    FUSE = "fuse"


@dataclass(frozen=True)
class FaultAttribution:
    """One faulty node, the failure class, and supporting trace excerpts."""

    node_id: str
    kind: FailureKind
    evidence: tuple[str, ...] = ()


@dataclass(frozen=True)
class SemanticGradient:
    """The teacher's reading of a failed batch: where and why, plus a hint.

    An empty ``fault_nodes`` tuple means the critic found nothing to fix;
    proposers treat it as a request for a no-op.
    """

    critique_text: str
    fault_nodes: tuple[FaultAttribution, ...] = ()
    suggested_action: ActionKind | None = None


@dataclass(frozen=True)
class MasterPrompt:
    """Standing directives given to the teacher, fixed for a whole run."""

    text: str


DEFAULT_MASTER_PROMPT = MasterPrompt(
    text=(
        "You are rewriting an execution plan for a small model.\n"
        "Directives, fixed for the whole run:\n"
        "- The plan is a DAG with one source and one sink; every node is\n"
        "  either a model call or a deterministic program, never both.\n"
        "- Programs use the closed expression language (numbers, + - * / %\n"
        "  ^, parse_json, extract_answer, majority_vote, numbers, text).\n"
        "- Prefer the smallest edit that removes the dominant failure:\n"
        "  refine a prompt, split a node, offload deterministic work to a\n"
        "  program, or wrap an unstable node in replicas with a vote.\n"
        "- Keep descriptions short; budgets are enforced.\n"
        "- Never resubmit a previously evaluated plan."
    )
)


class ProposalError(RuntimeError):
    """A teacher proposal could not be turned into a plan.

    Raising this inside ``propose`` consumes one retry instead of aborting
    the run, putting malformed edit scripts on the same footing as plans
    that fail validation.
    """


@dataclass(frozen=True)
class OptimizerConfig:
    epsilon: float = 0.0
    max_epochs: int = 8
    tabu_enabled: bool = False
    tabu_capacity: int = 64
    loss: LossConfig = DEFAULT_LOSS
    proposal_retries: int = 3
    node_parallelism: int = 1
    task_parallelism: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if self.tabu_capacity < 1:
            raise ValueError("tabu_capacity must be at least 1")
        if self.proposal_retries < 0:
            raise ValueError("proposal_retries must be non-negative")
        if self.node_parallelism < 1 or self.task_parallelism < 1:
            raise ValueError("parallelism must be at least 1")


class TabuHistory:
    """Bounded ring of canonical fingerprints of evaluated plans."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self._entries: deque[bytes] = deque(maxlen=capacity)

    def add(self, fingerprint: bytes) -> None:
        if fingerprint not in self._entries:
            self._entries.append(fingerprint)

    def __contains__(self, fingerprint: object) -> bool:
        return fingerprint in self._entries

    def __len__(self) -> int:
        return len(self._entries)


def accept(candidate_risk: float, current_risk: float) -> bool:
    """Greedy acceptance: strictly better or nothing. Ties are rejected."""
    return candidate_risk < current_risk


def tabu_check(candidate: ExecutionPlan, history: TabuHistory) -> bool:
    """True when the candidate's canonical bytes are new to this run."""
    return plan_fingerprint(candidate) not in history


class RunOutcome(str, Enum):
    CONVERGED = "converged"
    EXHAUSTED = "exhausted"
    # Not a terminal verdict: marks the partial record carried by
    # OptimizationAborted when a backend dies mid-run.
    ABORTED = "aborted"


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    candidate_plan_id: str
    candidate_risk: float | None
    accepted: bool
    best_risk: float
    skipped: bool = False
    note: str = ""


@dataclass(frozen=True)
class RunRecord:
    outcome: RunOutcome
    initial_risk: float
    best_risk: float
    best_plan_id: str
    epochs: tuple[EpochRecord, ...]
    evaluations: int
    proposals: int


RUN_SCHEMA_ID = "flowc-run/1"


def run_record_to_jsonable(record: RunRecord) -> dict:
    return {
        "schema": RUN_SCHEMA_ID,
        "outcome": record.outcome.value,
        "initial_risk": record.initial_risk,
        "best_risk": record.best_risk,
        "best_plan_id": record.best_plan_id,
        "evaluations": record.evaluations,
        "proposals": record.proposals,
        "epochs": [
            {
                "epoch": e.epoch,
                "candidate_plan_id": e.candidate_plan_id,
                "candidate_risk": e.candidate_risk,
                "accepted": e.accepted,
                "best_risk": e.best_risk,
                "skipped": e.skipped,
                "note": e.note,
            }
            for e in record.epochs
        ],
    }


class OptimizationAborted(RuntimeError):
    """A backend failed mid-run; carries the partial record and best plan."""

    def __init__(self, stage: str, reason: str, record: RunRecord,
                 best_plan: ExecutionPlan) -> None:
        super().__init__(f"{stage}: {reason}")
        self.stage = stage
        self.record = record
        self.best_plan = best_plan


class EpochObserver(Protocol):
    """Checkpoint hook, called after the initial evaluation (epoch 0) and
    after every epoch with the candidate (if any) and the current best."""

    def __call__(self, epoch: int, best: ExecutionPlan, best_risk: float,
                 candidate: ExecutionPlan | None) -> None: ...


def optimize(
    plan: ExecutionPlan,
    train: Sequence[TaskSample],
    student: Student,
    teacher: "TeacherBackend",
    master: MasterPrompt = DEFAULT_MASTER_PROMPT,
    config: OptimizerConfig = OptimizerConfig(),
    observer: EpochObserver | None = None,
) -> tuple[ExecutionPlan, RunRecord]:
    """Hill-climb from ``plan`` until risk <= epsilon or the budget is spent.

    The best plan's traces are cached between epochs, so a run costs one
    batch evaluation up front plus one per proposed candidate. Candidates
    that fail validation, or that repeat an evaluated plan while tabu is
    enabled, are re-requested with feedback up to ``proposal_retries``
    times; an epoch whose retries run out is recorded as skipped.
    """
    if not train:
        raise ValueError("training batch is empty")
    report = validate_plan(plan)
    if not report.ok:
        raise InvalidPlanError(report)

    golds = [t.gold_answer for t in train]
    epochs: list[EpochRecord] = []
    evaluations = 0
    proposals = 0
    best = plan
    best_risk = float("inf")

    def partial() -> RunRecord:
        return RunRecord(
            outcome=RunOutcome.ABORTED,
            initial_risk=initial_risk,
            best_risk=best_risk,
            best_plan_id=best.plan_id,
            epochs=tuple(epochs),
            evaluations=evaluations,
            proposals=proposals,
        )

    def evaluate(candidate: ExecutionPlan) -> tuple[float, list[ExecutionTrace]]:
        traces = run_batch(
            candidate, train, student,
            task_parallelism=config.task_parallelism,
            node_parallelism=config.node_parallelism,
        )
        return batch_risk(traces, golds, config.loss), traces

    initial_risk = 0.0
    try:
        best_risk, best_traces = evaluate(best)
    except Exception as exc:
        raise OptimizationAborted("evaluate", str(exc), partial(), best) from exc
    evaluations = 1
    initial_risk = best_risk
    history = TabuHistory(config.tabu_capacity)
    history.add(plan_fingerprint(best))
    if observer is not None:
        observer(0, best, best_risk, None)

    converged = best_risk <= config.epsilon
    for epoch in range(1, config.max_epochs + 1):
        if converged:
            break

        try:
            gradient = teacher.critique(master, best, best_traces, best_risk)
        except Exception as exc:
            raise OptimizationAborted("critique", str(exc), partial(), best) from exc
        unknown = [f.node_id for f in gradient.fault_nodes
                   if f.node_id not in best.graph.nodes]
        if unknown:
            raise OptimizationAborted(
                "critique", f"fault nodes not in plan: {unknown}", partial(), best
            )

        candidate: ExecutionPlan | None = None
        feedback: str | None = None
        for _ in range(1 + config.proposal_retries):
            try:
                proposed = teacher.propose(master, gradient, best, feedback=feedback)
            except ProposalError as exc:
                proposals += 1
                feedback = f"proposal failed: {exc}"
                continue
            except Exception as exc:
                raise OptimizationAborted("propose", str(exc), partial(), best) from exc
            proposals += 1
            candidate_report = validate_plan(proposed)
            if not candidate_report.ok:
                feedback = f"invalid plan: {candidate_report.summary()}"
                continue
            if config.tabu_enabled and not tabu_check(proposed, history):
                feedback = "candidate repeats an already evaluated plan"
                continue
            candidate = proposed.with_meta(epoch=epoch)
            break

        if candidate is None:
            epochs.append(EpochRecord(
                epoch=epoch, candidate_plan_id="", candidate_risk=None,
                accepted=False, best_risk=best_risk, skipped=True,
                note=feedback or "no proposal",
            ))
            if observer is not None:
                observer(epoch, best, best_risk, None)
            continue

        try:
            candidate_risk, candidate_traces = evaluate(candidate)
        except Exception as exc:
            raise OptimizationAborted("evaluate", str(exc), partial(), best) from exc
        evaluations += 1
        history.add(plan_fingerprint(candidate))

        accepted = accept(candidate_risk, best_risk)
        if accepted:
            best, best_risk, best_traces = candidate, candidate_risk, candidate_traces
        epochs.append(EpochRecord(
            epoch=epoch, candidate_plan_id=candidate.plan_id,
            candidate_risk=candidate_risk, accepted=accepted, best_risk=best_risk,
        ))
        if observer is not None:
            observer(epoch, best, best_risk, candidate)
        converged = best_risk <= config.epsilon

    outcome = RunOutcome.CONVERGED if best_risk <= config.epsilon else RunOutcome.EXHAUSTED
    record = RunRecord(
        outcome=outcome,
        initial_risk=initial_risk,
        best_risk=best_risk,
        best_plan_id=best.plan_id,
        epochs=tuple(epochs),
        evaluations=evaluations,
        proposals=proposals,
    )
    return best, record
