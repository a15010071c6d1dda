"""Student and teacher backends.

Students answer single node calls; teachers read whole traces and emit
plan rewrites. Both come in three flavors: scripted (canned, for tests),
simulated (deterministic pseudo-random error injection, for offline
experiments) and HTTP (a chat-completions endpoint, for real models).
The simulated backends derive one RNG stream per (seed, node, task), so
results never depend on execution order or thread count.
"""

from __future__ import annotations

import json
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from random import Random
from typing import Mapping, Protocol, Sequence

import httpx

from . import expr
from .executor import (
    ExecutionTrace,
    StudentCall,
    StudentError,
    StudentReply,
    TaskSample,
    TraceStatus,
    mock_token_cost,
)
from .optimizer import (
    ActionKind,
    FailureKind,
    FaultAttribution,
    MasterPrompt,
    ProposalError,
    SemanticGradient,
)
from .plan import (
    TASK_BINDING,
    CodeArtifact,
    ExecutionPlan,
    NodeKind,
    OutputType,
    PlanError,
    PromptSpec,
    RoleTag,
    parse_plan,
    serialize_plan,
)
from .risk import answers_match
from .transform import (
    TransformError,
    apply_edit_script,
    decompose_node,
    offload_node,
    part_ids,
    refine_prompt,
    wrap_consensus,
)


_compiled = lru_cache(maxsize=256)(expr.compile_program)


# --------------------------------------------------------------------------
# Task families
#
# A blueprint names the numeric slots a task family states in its text, in
# narrative order, and the formula that turns them into the answer. The
# simulated student uses it to know the right answer before corrupting it;
# the rule-based teacher uses it to replay what a flawless run would look
# like and to synthesize offloaded programs.


@dataclass(frozen=True)
class FamilyBlueprint:
    slots: tuple[str, ...]
    formula: str

    def __post_init__(self) -> None:
        if not self.slots:
            raise ValueError("a blueprint needs at least one slot")
        for slot in self.slots:
            if not slot.isidentifier():
                raise ValueError(f"slot {slot!r} is not an identifier")
        unknown = expr.free_names(_compiled(self.formula)) - set(self.slots)
        if unknown:
            raise ValueError(f"formula reads undeclared names {sorted(unknown)}")

    def operands(self, task_text: str) -> dict[str, expr.Number]:
        """The first len(slots) numbers stated in the task, slot-labelled."""
        values = expr.find_numbers(task_text)
        if len(values) < len(self.slots):
            raise ValueError(
                f"task states {len(values)} numbers, blueprint needs {len(self.slots)}"
            )
        return dict(zip(self.slots, values))

    def evaluate(self, operands: Mapping[str, expr.Number]) -> expr.Number:
        value = expr.eval_program(_compiled(self.formula), dict(operands))
        if not expr.is_number(value):
            raise ValueError("blueprint formula did not produce a number")
        return value

    def answer(self, task_text: str) -> expr.Number:
        return self.evaluate(self.operands(task_text))


def _render_number(value: expr.Number) -> str:
    if isinstance(value, Fraction):
        if value.denominator == 1:
            return str(value.numerator)
        return repr(float(value))
    return str(value)


def _json_number(value: expr.Number) -> int | float:
    if isinstance(value, Fraction):
        if value.denominator == 1:
            return value.numerator
        return float(value)
    return value


def _operands_json(operands: Mapping[str, expr.Number]) -> str:
    return json.dumps({k: _json_number(v) for k, v in operands.items()}, sort_keys=True)


def _solution_text(blueprint: FamilyBlueprint, operands: Mapping[str, expr.Number],
                   answer: expr.Number) -> str:
    stated = ", ".join(_render_number(operands[s]) for s in blueprint.slots)
    return f"Values used: {stated}. Final answer: {_render_number(answer)}"


# --------------------------------------------------------------------------
# Students


class ScriptedStudent:
    """Plays back canned node outputs.

    Keys are ``(node_id, task_id)`` pairs, with a bare ``node_id`` as the
    task-independent fallback. Missing entries fail the call.
    """

    def __init__(self, outputs: Mapping[tuple[str, str] | str, str]) -> None:
        self._outputs = dict(outputs)

    def complete(self, call: StudentCall) -> StudentReply:
        text = self._outputs.get((call.node_id, call.task_id))
        if text is None:
            text = self._outputs.get(call.node_id)
        if text is None:
            raise StudentError(
                f"no scripted output for node {call.node_id!r} on task {call.task_id!r}"
            )
        return StudentReply(
            text=text,
            token_cost=mock_token_cost(call.prompt_text) + mock_token_cost(text),
        )


@dataclass(frozen=True)
class FixedWrongValue:
    """Always the same wrong answer. Keeps replica errors perfectly
    correlated, which is what makes the consensus error rate closed-form."""

    value: int = 0

    def pick(self, rng: Random, correct: expr.Number) -> expr.Number:
        if Fraction(self.value) == Fraction(correct):
            return self.value - 1
        return self.value


@dataclass(frozen=True)
class OffsetByOne:
    def pick(self, rng: Random, correct: expr.Number) -> expr.Number:
        return correct + 1


@dataclass(frozen=True)
class RandomDigit:
    def pick(self, rng: Random, correct: expr.Number) -> expr.Number:
        digit = rng.randrange(10)
        if Fraction(digit) == Fraction(correct):
            digit = (digit + 1) % 10
        return digit


WrongPolicy = FixedWrongValue | OffsetByOne | RandomDigit


@dataclass(frozen=True)
class SubtaskErrorProfile:
    """Failure rates for the two subtask skills the simulation models.

    ``parse_error_p`` is the chance of corrupting the first operand while
    reading the task; ``arithmetic_error_p`` the chance of botching the
    final computation. Both are per-call and independent.
    """

    arithmetic_error_p: float = 0.0
    parse_error_p: float = 0.0
    wrong_policy: WrongPolicy = FixedWrongValue(0)

    def __post_init__(self) -> None:
        for name in ("arithmetic_error_p", "parse_error_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


class NoisyStudent:
    """A simulated student that knows the answer but fails on purpose.

    Behavior per call, driven by ``Random(f"{seed}|{node_id}|{task_id}")``:

    - parse-role nodes emit the task's operands as a JSON object, with the
      first slot corrupted at ``parse_error_p``;
    - every other node computes the family formula, either over a single
      JSON operand input (upstream already parsed: only the arithmetic
      draw applies) or straight from the task text (both draws apply),
      and emits prose ending in the final number.

    Prompts and temperatures are deliberately ignored: the error rates are
    properties of the simulated model, which is what lets experiments
    separate prompt refinement from structural compilation.
    """

    def __init__(
        self,
        seed: int,
        blueprints: Mapping[str, FamilyBlueprint],
        profile: SubtaskErrorProfile | Mapping[str, SubtaskErrorProfile],
    ) -> None:
        if not blueprints:
            raise ValueError("at least one family blueprint is required")
        self._seed = seed
        self._blueprints = dict(blueprints)
        if isinstance(profile, SubtaskErrorProfile):
            self._profiles = {tag: profile for tag in self._blueprints}
        else:
            self._profiles = dict(profile)
            missing = set(self._blueprints) - set(self._profiles)
            if missing:
                raise ValueError(f"families without a profile: {sorted(missing)}")

    def complete(self, call: StudentCall) -> StudentReply:
        blueprint = self._blueprints.get(call.family_tag)
        profile = self._profiles.get(call.family_tag)
        if blueprint is None or profile is None:
            raise StudentError(f"unknown task family {call.family_tag!r}")
        rng = Random(f"{self._seed}|{call.node_id}|{call.task_id}")
        try:
            if call.role is RoleTag.PARSE:
                text = self._parse_step(rng, call, blueprint, profile)
            else:
                text = self._solve_step(rng, call, blueprint, profile)
        except ValueError as exc:
            raise StudentError(str(exc)) from exc
        return StudentReply(
            text=text,
            token_cost=mock_token_cost(call.prompt_text) + mock_token_cost(text),
        )

    def _parse_step(self, rng: Random, call: StudentCall,
                    blueprint: FamilyBlueprint, profile: SubtaskErrorProfile) -> str:
        operands = blueprint.operands(call.task_text)
        if rng.random() < profile.parse_error_p:
            first = blueprint.slots[0]
            operands[first] = profile.wrong_policy.pick(rng, operands[first])
        return _operands_json(operands)

    def _solve_step(self, rng: Random, call: StudentCall,
                    blueprint: FamilyBlueprint, profile: SubtaskErrorProfile) -> str:
        operands = self._given_operands(call, blueprint)
        if operands is None:
            operands = blueprint.operands(call.task_text)
            if rng.random() < profile.parse_error_p:
                first = blueprint.slots[0]
                operands[first] = profile.wrong_policy.pick(rng, operands[first])
        answer = blueprint.evaluate(operands)
        if rng.random() < profile.arithmetic_error_p:
            answer = profile.wrong_policy.pick(rng, answer)
        return _solution_text(blueprint, operands, answer)

    @staticmethod
    def _given_operands(call: StudentCall,
                        blueprint: FamilyBlueprint) -> dict[str, expr.Number] | None:
        """A single upstream input that is exactly the operand object."""
        found = None
        for name in sorted(call.inputs):
            try:
                parsed = expr.parse_json_text(call.inputs[name])
            except expr.ExprError:
                continue
            if (
                isinstance(parsed, dict)
                and set(parsed) == set(blueprint.slots)
                and all(expr.is_number(v) for v in parsed.values())
            ):
                if found is not None:
                    return None
                found = parsed
        return found


# --------------------------------------------------------------------------
# HTTP chat backend


class ChatError(RuntimeError):
    """Base for chat-endpoint failures."""


class ChatAuthError(ChatError):
    """Credentials rejected; never retried."""


class ChatRateLimitError(ChatError):
    """Status 429 persisted through every retry."""


class ChatTransportError(ChatError):
    """Network failure or 5xx persisted through every retry."""


class ChatProtocolError(ChatError):
    """The endpoint answered with something other than a usable completion."""


@dataclass(frozen=True)
class ChatEndpoint:
    """Where and how to reach a chat-completions API.

    The API key is read from the environment variable named by
    ``api_key_env`` and never appears in configs, logs or errors.
    """

    base_url: str
    model: str
    api_key_env: str = "FLOWC_API_KEY"
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 0.5
    max_in_flight: int = 4
    log_path: str | None = None


_LOG_LOCK = threading.Lock()


def _log_exchange(endpoint: ChatEndpoint, record: dict) -> None:
    if endpoint.log_path is None:
        return
    line = json.dumps(record, sort_keys=True)
    with _LOG_LOCK:
        with open(endpoint.log_path, "a", encoding="utf-8") as handle:
            handle.write(line + "\n")


def chat_complete(
    endpoint: ChatEndpoint,
    messages: Sequence[Mapping[str, str]],
    *,
    temperature: float = 0.0,
    client: httpx.Client | None = None,
) -> tuple[str, int]:
    """One chat completion with bounded retries.

    429 and 5xx responses and transport failures back off exponentially
    (``backoff_base * 2**attempt``) and retry up to ``max_retries`` times;
    auth rejections and malformed payloads fail immediately. Every attempt
    is appended to the JSONL log when one is configured, with the
    authorization header reduced to a presence flag.
    """
    url = endpoint.base_url.rstrip("/") + "/chat/completions"
    headers = {}
    key = os.environ.get(endpoint.api_key_env, "")
    if key:
        headers["authorization"] = f"Bearer {key}"
    payload = {
        "model": endpoint.model,
        "messages": [dict(m) for m in messages],
        "temperature": temperature,
    }
    own_client = client is None
    if own_client:
        client = httpx.Client(timeout=endpoint.timeout)
    last_error: ChatError = ChatTransportError("no attempt made")
    try:
        for attempt in range(endpoint.max_retries + 1):
            if attempt:
                time.sleep(endpoint.backoff_base * 2 ** (attempt - 1))
            log_record = {
                "url": url,
                "model": endpoint.model,
                "attempt": attempt,
                "authorization": "present" if key else "absent",
                "request_messages": payload["messages"],
                "status": None,
                "error": None,
            }
            try:
                response = client.post(url, json=payload, headers=headers)
            except httpx.HTTPError as exc:
                last_error = ChatTransportError(f"transport failure: {exc}")
                log_record["error"] = str(exc)
                _log_exchange(endpoint, log_record)
                continue
            log_record["status"] = response.status_code
            log_record["response_excerpt"] = response.text[:2000]
            _log_exchange(endpoint, log_record)
            if response.status_code in (401, 403):
                raise ChatAuthError(f"endpoint rejected credentials ({response.status_code})")
            if response.status_code == 429:
                last_error = ChatRateLimitError("rate limited (429)")
                continue
            if response.status_code >= 500:
                last_error = ChatTransportError(f"server error ({response.status_code})")
                continue
            if response.status_code != 200:
                raise ChatProtocolError(f"unexpected status {response.status_code}")
            return _parse_completion(response)
        raise last_error
    finally:
        if own_client:
            client.close()


def _parse_completion(response: httpx.Response) -> tuple[str, int]:
    try:
        doc = response.json()
    except ValueError as exc:
        raise ChatProtocolError("response body is not JSON") from exc
    try:
        content = doc["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ChatProtocolError("response lacks choices[0].message.content") from exc
    if not isinstance(content, str):
        raise ChatProtocolError("completion content is not text")
    usage = doc.get("usage")
    tokens = usage.get("total_tokens") if isinstance(usage, dict) else None
    if not isinstance(tokens, int) or isinstance(tokens, bool) or tokens < 0:
        tokens = mock_token_cost(content)
    return content, tokens


class HttpChatStudent:
    """Student backed by a chat endpoint, one completion per node call."""

    def __init__(self, endpoint: ChatEndpoint,
                 system_text: str = "You execute one step of a fixed plan. "
                                    "Follow the prompt exactly.") -> None:
        self._endpoint = endpoint
        self._system_text = system_text
        self._client = httpx.Client(timeout=endpoint.timeout)
        self._gate = threading.Semaphore(endpoint.max_in_flight)

    def complete(self, call: StudentCall) -> StudentReply:
        messages = []
        if self._system_text:
            messages.append({"role": "system", "content": self._system_text})
        messages.append({"role": "user", "content": call.prompt_text})
        with self._gate:
            try:
                text, cost = chat_complete(
                    self._endpoint, messages,
                    temperature=call.temperature, client=self._client,
                )
            except ChatError as exc:
                raise StudentError(str(exc)) from exc
        return StudentReply(text=text, token_cost=cost)

    def close(self) -> None:
        self._client.close()


# --------------------------------------------------------------------------
# Teachers


class TeacherBackend(Protocol):
    """Two calls per optimization epoch: read the traces, then rewrite.

    ``propose`` may raise :class:`~flowc.optimizer.ProposalError` to signal
    a recoverable bad proposal; ``feedback`` carries the rejection reason
    when the optimizer asks again.
    """

    def critique(self, master: MasterPrompt, plan: ExecutionPlan,
                 traces: Sequence[ExecutionTrace], risk: float) -> SemanticGradient: ...

    def propose(self, master: MasterPrompt, gradient: SemanticGradient,
                plan: ExecutionPlan, feedback: str | None = None) -> ExecutionPlan: ...


class ScriptedTeacher:
    """Plays back a fixed sequence of proposals.

    Each item is a full plan or an edit script; one item is consumed per
    ``propose`` call, including retries. When the script runs out the
    current plan comes back unchanged.
    """

    def __init__(self, proposals: Sequence[ExecutionPlan | dict | list]) -> None:
        self._proposals = list(proposals)
        self._cursor = 0

    def critique(self, master: MasterPrompt, plan: ExecutionPlan,
                 traces: Sequence[ExecutionTrace], risk: float) -> SemanticGradient:
        return SemanticGradient(critique_text=f"scripted review at risk {risk:.6f}")

    def propose(self, master: MasterPrompt, gradient: SemanticGradient,
                plan: ExecutionPlan, feedback: str | None = None) -> ExecutionPlan:
        if self._cursor >= len(self._proposals):
            return plan
        item = self._proposals[self._cursor]
        self._cursor += 1
        if isinstance(item, ExecutionPlan):
            return item
        try:
            return apply_edit_script(plan, item)
        except PlanError as exc:
            raise ProposalError(str(exc)) from exc


_KIND_ACTION = {
    FailureKind.ARITHMETIC: ActionKind.OFFLOAD,
    FailureKind.VARIANCE: ActionKind.CONSENSUS,
    FailureKind.CONTEXT_BLOAT: ActionKind.DECOMPOSE,
    FailureKind.PARSING: ActionKind.PROMPT_REFINE,
    FailureKind.FORMATTING: ActionKind.PROMPT_REFINE,
    FailureKind.OTHER: ActionKind.PROMPT_REFINE,
}

_REFINE_DIRECTIVES = {
    FailureKind.ARITHMETIC: "Recompute every operation and check it before answering.",
    FailureKind.VARIANCE: "State every value you extract before using it.",
    FailureKind.FORMATTING: "End with a single line containing only the final number.",
    FailureKind.PARSING: "Quote each quantity from the task before computing.",
    FailureKind.CONTEXT_BLOAT: "Answer only your own step; ignore unrelated context.",
    FailureKind.OTHER: "Re-read the task and answer it directly.",
}


class RuleBasedTeacher:
    """A deterministic stand-in for a strong teacher model.

    The critic replays each failed task as a flawless student would have
    executed it (blueprint operands, blueprint formula, the plan's own
    programs) and attributes the failure to the first node whose recorded
    output diverges from that replay. The divergence shape picks the
    failure kind: a node whose stated final answer contradicts its own
    stated operands failed the arithmetic; a node whose operands are wrong
    but internally consistent is unstable extraction; replica groups that
    disagree are variance by definition.

    The proposer maps the dominant kind to one rewrite: arithmetic faults
    are offloaded to a synthesized program (splitting a task-reading node
    into parse and compute stages first), variance is wrapped in a voted
    replica group, everything else gets its prompt refined. Construction
    may restrict the action set; disallowed rewrites degrade to prompt
    refinement.
    """

    def __init__(
        self,
        blueprints: Mapping[str, FamilyBlueprint],
        tasks: Sequence[TaskSample] = (),
        *,
        actions: Sequence[ActionKind] | None = None,
        consensus_temperatures: Sequence[float] = (0.2, 0.5, 0.8),
    ) -> None:
        self._blueprints = dict(blueprints)
        self._tasks = {t.task_id: t for t in tasks}
        self._actions = frozenset(ActionKind) if actions is None else frozenset(actions)
        if not self._actions:
            raise ValueError("the teacher needs at least one allowed action")
        self._temps = tuple(consensus_temperatures)
        self._refine_round = 0
        self._target_family = ""

    # -- critic ------------------------------------------------------------

    def critique(self, master: MasterPrompt, plan: ExecutionPlan,
                 traces: Sequence[ExecutionTrace], risk: float) -> SemanticGradient:
        if risk <= 0:
            return SemanticGradient(critique_text="no failures in the batch")
        order = plan.graph.topological_order()
        position = {node_id: i for i, node_id in enumerate(order)}
        counts: Counter[tuple[str, FailureKind]] = Counter()
        evidence: dict[tuple[str, FailureKind], list[str]] = {}
        family_votes: Counter[str] = Counter()
        failed = 0

        for trace in traces:
            fault = self._attribute(plan, order, trace)
            if fault is None:
                continue
            failed += 1
            node_id, kind, note = fault
            counts[(node_id, kind)] += 1
            notes = evidence.setdefault((node_id, kind), [])
            if len(notes) < 3:
                notes.append(f"{trace.task_id}: {note}")
            task = self._tasks.get(trace.task_id)
            if task is not None:
                family_votes[task.family_tag] += 1

        if not counts:
            return SemanticGradient(
                critique_text=f"risk {risk:.6f} but no attributable faults"
            )
        ranked = sorted(
            counts.items(),
            key=lambda item: (-item[1], position[item[0][0]], item[0][1].value),
        )
        self._target_family = ""
        if family_votes:
            self._target_family = min(
                family_votes, key=lambda tag: (-family_votes[tag], tag)
            )
        faults = tuple(
            FaultAttribution(node_id=node_id, kind=kind, evidence=tuple(evidence[(node_id, kind)]))
            for (node_id, kind), _ in ranked[:5]
        )
        dominant_node, dominant_kind = ranked[0][0]
        text = (
            f"{failed} of {len(traces)} traces failed (risk {risk:.6f}); "
            f"dominant fault: {dominant_kind.value} at node {dominant_node!r}"
        )
        return SemanticGradient(
            critique_text=text,
            fault_nodes=faults,
            suggested_action=_KIND_ACTION[dominant_kind],
        )

    def _attribute(self, plan: ExecutionPlan, order: Sequence[str],
                   trace: ExecutionTrace) -> tuple[str, FailureKind, str] | None:
        if trace.status is TraceStatus.NODE_ERROR:
            node = trace.error_node or order[0]
            return node, FailureKind.FORMATTING, trace.error_reason or "node failed"
        task = self._tasks.get(trace.task_id)
        blueprint = self._blueprints.get(task.family_tag) if task else None
        if task is None or blueprint is None:
            # Without the task there is no oracle; wrong-but-clean traces
            # cannot be attributed.
            return None
        try:
            operands = blueprint.operands(task.prompt_text)
            gold = blueprint.evaluate(operands)
        except ValueError:
            return None
        if answers_match(trace.final_answer, gold):
            return None
        try:
            ideal = self._replay(plan, order, task, blueprint, operands, gold)
        except expr.ExprError:
            return None

        records = {r.node_id: r for r in trace.records}
        for node_id in order:
            record = records.get(node_id)
            if record is None or node_id not in ideal:
                continue
            node = plan.graph.nodes[node_id]
            if node.kind is NodeKind.CODE:
                if not _values_equal(record.parsed_output, ideal[node_id]):
                    return node_id, FailureKind.OTHER, (
                        "program output diverged from replay despite matching inputs"
                    )
                continue
            fault = self._compare_llm(plan, node, record, ideal[node_id],
                                      blueprint, operands, records)
            if fault is not None:
                return fault
        # Every node matched the flawless replay, yet the answer is wrong:
        # the plan itself computes the wrong function. Blame the last
        # program node (the artifact encodes the formula).
        for node_id in reversed(order):
            if plan.graph.nodes[node_id].kind is NodeKind.CODE:
                return node_id, FailureKind.ARITHMETIC, (
                    f"program computes {_render_number(trace.final_answer)} "
                    f"where the task needs {_render_number(gold)}"
                )
        return order[-1], FailureKind.OTHER, "failure not attributable to any node"

    def _compare_llm(self, plan, node, record, ideal_value, blueprint,
                     true_operands, records) -> tuple[str, FailureKind, str] | None:
        if node.role is RoleTag.PARSE and not expr.is_number(ideal_value):
            try:
                stated = expr.parse_json_text(record.raw_output)
            except expr.ExprError:
                return node.id, FailureKind.FORMATTING, "operand output is not JSON"
            if not _values_equal(stated, expr.parse_json_text(ideal_value)):
                return node.id, FailureKind.VARIANCE, (
                    f"extracted operands {record.raw_output!r} do not match the task"
                )
            return None
        if expr.is_number(record.parsed_output):
            final = record.parsed_output
        else:
            try:
                final = expr.extract_answer(record.raw_output)
            except expr.ExprError:
                return node.id, FailureKind.FORMATTING, "no numeric answer in output"
        ideal_number = (
            ideal_value if expr.is_number(ideal_value)
            else expr.extract_answer(ideal_value)
        )
        if Fraction(final) == Fraction(ideal_number):
            return None
        kind = self._classify_wrong_number(record.raw_output, final, blueprint)
        if kind is not FailureKind.VARIANCE and self._replicas_disagree(plan, node.id, records):
            kind = FailureKind.VARIANCE
        return node.id, kind, (
            f"answered {_render_number(final)}, replay expects "
            f"{_render_number(ideal_number)}"
        )

    @staticmethod
    def _classify_wrong_number(raw_output: str, final: expr.Number,
                               blueprint: FamilyBlueprint) -> FailureKind:
        """Arithmetic if the output contradicts its own stated operands,
        variance if it is self-consistent (so the operands were wrong)."""
        stated = expr.find_numbers(raw_output)
        width = len(blueprint.slots)
        if len(stated) >= width + 1:
            try:
                recomputed = blueprint.evaluate(dict(zip(blueprint.slots, stated[:width])))
            except (ValueError, expr.ExprError):
                return FailureKind.ARITHMETIC
            if Fraction(recomputed) == Fraction(final):
                return FailureKind.VARIANCE
        return FailureKind.ARITHMETIC

    @staticmethod
    def _replicas_disagree(plan: ExecutionPlan, node_id: str,
                           records: Mapping[str, object]) -> bool:
        for succ in plan.graph.successors(node_id):
            if plan.graph.nodes[succ].role is not RoleTag.VOTE:
                continue
            seen = set()
            for peer in plan.graph.predecessors(succ):
                record = records.get(peer)
                if record is not None and expr.is_number(record.parsed_output):
                    seen.add(Fraction(record.parsed_output))
            if len(seen) > 1:
                return True
        return False

    def _replay(self, plan, order, task, blueprint, operands, gold) -> dict[str, expr.Value]:
        """Node values a flawless student would have produced, mirroring
        the executor's extraction points."""
        sink = plan.graph.sinks()[0]
        values: dict[str, expr.Value] = {}
        for node_id in order:
            node = plan.graph.nodes[node_id]
            extracted = node_id == sink or any(
                plan.graph.nodes[s].role is RoleTag.VOTE
                for s in plan.graph.successors(node_id)
            )
            if node.kind is NodeKind.CODE:
                artifact = plan.code[node_id]
                bindings = {name: values[name] for name in artifact.inputs}
                bindings[TASK_BINDING] = task.prompt_text
                values[node_id] = expr.eval_program(artifact.program, bindings)
            elif node.role is RoleTag.PARSE:
                text = _operands_json(operands)
                values[node_id] = expr.extract_answer(text) if extracted else text
            else:
                values[node_id] = gold if extracted else _render_number(gold)
        return values

    # -- proposer ----------------------------------------------------------

    def propose(self, master: MasterPrompt, gradient: SemanticGradient,
                plan: ExecutionPlan, feedback: str | None = None) -> ExecutionPlan:
        if not gradient.fault_nodes:
            return plan
        fault = gradient.fault_nodes[0]
        node = plan.graph.nodes.get(fault.node_id)
        if node is None:
            raise ProposalError(f"fault node {fault.node_id!r} is not in the plan")
        action = self._usable_action(_KIND_ACTION[fault.kind], node, plan)
        try:
            if action is ActionKind.OFFLOAD:
                return self._propose_offload(plan, fault.node_id)
            if action is ActionKind.CONSENSUS:
                return self._propose_consensus(plan, fault.node_id)
            if action is ActionKind.DECOMPOSE:
                return self._propose_decompose(plan, fault.node_id)
            if action is ActionKind.PROMPT_REFINE:
                return self._propose_refine(plan, fault.node_id, fault.kind)
        except (TransformError, PlanError) as exc:
            raise ProposalError(str(exc)) from exc
        return plan

    def _usable_action(self, action: ActionKind, node,
                       plan: ExecutionPlan) -> ActionKind | None:
        if node.kind is not NodeKind.LLM:
            action = ActionKind.PROMPT_REFINE
        elif action is ActionKind.CONSENSUS and self._in_replica_group(plan, node.id):
            action = ActionKind.PROMPT_REFINE
        elif action is ActionKind.OFFLOAD and self._offload_blueprint() is None:
            action = ActionKind.PROMPT_REFINE
        if action not in self._actions:
            action = (ActionKind.PROMPT_REFINE
                      if ActionKind.PROMPT_REFINE in self._actions else None)
        return action

    @staticmethod
    def _in_replica_group(plan: ExecutionPlan, node_id: str) -> bool:
        return any(
            plan.graph.nodes[s].role is RoleTag.VOTE
            for s in plan.graph.successors(node_id)
        )

    def _offload_blueprint(self) -> FamilyBlueprint | None:
        if self._target_family in self._blueprints:
            return self._blueprints[self._target_family]
        if len(self._blueprints) == 1:
            return next(iter(self._blueprints.values()))
        return None

    def _formula_over_json(self, blueprint: FamilyBlueprint, source: str) -> str:
        """The family formula with each slot read from a JSON input."""
        replacements = {
            slot: expr.Field(
                base=expr.Call(func="parse_json", args=(expr.Name(source),)),
                name=slot,
            )
            for slot in blueprint.slots
        }
        return expr.substitute(_compiled(blueprint.formula), replacements).source

    def _propose_offload(self, plan: ExecutionPlan, node_id: str) -> ExecutionPlan:
        blueprint = self._offload_blueprint()
        if blueprint is None:
            return self._propose_refine(plan, node_id, FailureKind.ARITHMETIC)
        preds = plan.graph.predecessors(node_id)
        if len(preds) == 1 and plan.graph.nodes[preds[0]].role is RoleTag.PARSE:
            artifact = CodeArtifact(
                program=self._formula_over_json(blueprint, preds[0]),
                inputs=(preds[0],),
                output_type=OutputType.NUMBER,
            )
            return offload_node(plan, node_id, artifact)
        # The node still reads the raw task: split out a parse stage first,
        # then compile the compute stage away.
        slots = ", ".join(blueprint.slots)
        parts = [
            (
                "extract the stated quantities",
                PromptSpec(text=(
                    "Read the task and report the quantities it states as a "
                    f"JSON object with keys {slots}, bare numbers only."
                )),
                RoleTag.PARSE,
            ),
            (
                "compute the final answer",
                PromptSpec(text="Compute the answer from the extracted values. "
                                "End with the final number."),
                RoleTag.EVAL,
            ),
        ]
        parse_id, eval_id = part_ids(plan, node_id, 2)
        split = decompose_node(plan, node_id, parts)
        artifact = CodeArtifact(
            program=self._formula_over_json(blueprint, parse_id),
            inputs=(parse_id,),
            output_type=OutputType.NUMBER,
        )
        return offload_node(split, eval_id, artifact)

    def _propose_consensus(self, plan: ExecutionPlan, node_id: str) -> ExecutionPlan:
        base = plan.prompts[node_id].text
        nudges = (
            "Work through the task carefully step by step.",
            "List every value you take from the task before computing.",
            "Derive the result, then re-derive it independently to confirm.",
        )
        specs = [
            PromptSpec(text=base, perturbation=nudges[i % len(nudges)],
                       temperature=self._temps[i % len(self._temps)])
            for i in range(3)
        ]
        return wrap_consensus(plan, node_id, specs)

    def _propose_decompose(self, plan: ExecutionPlan, node_id: str) -> ExecutionPlan:
        node = plan.graph.nodes[node_id]
        base = plan.prompts[node_id]
        parts = [
            (f"{node.scope} (first half)",
             PromptSpec(text=base.text + "\n\nDo only the first half of this step.")),
            (f"{node.scope} (second half)",
             PromptSpec(text=base.text + "\n\nFinish the step from the partial work. "
                                         "End with the final number.")),
        ]
        return decompose_node(plan, node_id, parts)

    def _propose_refine(self, plan: ExecutionPlan, node_id: str,
                        kind: FailureKind) -> ExecutionPlan:
        target = node_id
        if plan.graph.nodes[target].kind is not NodeKind.LLM:
            llm_nodes = [n for n in plan.graph.topological_order()
                         if plan.graph.nodes[n].kind is NodeKind.LLM]
            if not llm_nodes:
                return plan
            target = llm_nodes[0]
        old = plan.prompts[target]
        self._refine_round += 1
        spec = PromptSpec(
            text=f"{old.text}\n\nRevision {self._refine_round}: {_REFINE_DIRECTIVES[kind]}",
            perturbation=old.perturbation,
            temperature=old.temperature,
        )
        return refine_prompt(plan, target, spec)


def _values_equal(a: expr.Value, b: expr.Value) -> bool:
    if expr.is_number(a) and expr.is_number(b):
        return Fraction(a) == Fraction(b)
    if isinstance(a, str) and isinstance(b, str):
        return a == b
    if isinstance(a, dict) and isinstance(b, dict):
        return set(a) == set(b) and all(_values_equal(a[k], b[k]) for k in a)
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(_values_equal(x, y) for x, y in zip(a, b))
    return False


# --------------------------------------------------------------------------
# HTTP teacher

_CRITIQUE_INSTRUCTIONS = (
    "Review the execution traces below. Reply with your analysis followed "
    "by one JSON object of the form {\"fault_nodes\": [{\"node\": id, "
    "\"kind\": one of arithmetic|parsing|formatting|variance|context_bloat"
    "|other, \"evidence\": [strings]}], \"suggested_action\": one of "
    "prompt_refine|offload|consensus|decompose|fuse or null}."
)

_PROPOSE_INSTRUCTIONS = (
    "Rewrite the plan to remove the diagnosed fault. Reply with exactly one "
    "JSON object: either a full plan document (same schema as the one "
    "given) or an edit script {\"edits\": [...]} using ops refine_prompt, "
    "decompose, fuse, offload, consensus."
)


def _first_json_object(text: str) -> dict | None:
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start != -1:
        try:
            value, _ = decoder.raw_decode(text[start:])
        except ValueError:
            start = text.find("{", start + 1)
            continue
        if isinstance(value, dict):
            return value
        start = text.find("{", start + 1)
    return None


def _trace_digest(traces: Sequence[ExecutionTrace], limit: int = 6) -> str:
    lines = []
    shown = 0
    for trace in traces:
        if shown >= limit:
            lines.append(f"... {len(traces) - shown} more traces omitted")
            break
        shown += 1
        head = f"task {trace.task_id}: status {trace.status.value}"
        if trace.final_answer is not None:
            head += f", final {_render_number(trace.final_answer)}"
        if trace.error_node:
            head += f", failed at {trace.error_node} ({trace.error_reason})"
        lines.append(head)
        for record in trace.records:
            output = record.raw_output.replace("\n", " ")
            if len(output) > 160:
                output = output[:160] + "..."
            lines.append(f"  {record.node_id}: {output}")
    return "\n".join(lines)


class HttpChatTeacher:
    """Teacher backed by a chat endpoint.

    The critique call must end with a structured fault report; the propose
    call must return a full plan document or an edit script. Unusable
    critique replies are protocol errors (the run aborts), unusable
    proposals raise :class:`ProposalError` (the optimizer retries with
    feedback).
    """

    def __init__(self, endpoint: ChatEndpoint) -> None:
        self._endpoint = endpoint
        self._client = httpx.Client(timeout=endpoint.timeout)

    def close(self) -> None:
        self._client.close()

    def _ask(self, system_text: str, user_text: str) -> str:
        messages = [
            {"role": "system", "content": system_text},
            {"role": "user", "content": user_text},
        ]
        text, _ = chat_complete(self._endpoint, messages, client=self._client)
        return text

    def critique(self, master: MasterPrompt, plan: ExecutionPlan,
                 traces: Sequence[ExecutionTrace], risk: float) -> SemanticGradient:
        user = (
            f"Current plan:\n{serialize_plan(plan).decode('utf-8')}\n\n"
            f"Empirical risk: {risk:.6f}\n\nTraces:\n{_trace_digest(traces)}"
        )
        reply = self._ask(master.text + "\n\n" + _CRITIQUE_INSTRUCTIONS, user)
        payload = _first_json_object(reply)
        if payload is None or "fault_nodes" not in payload:
            raise ChatProtocolError("critique reply carries no fault_nodes object")
        faults = []
        raw_faults = payload["fault_nodes"]
        if not isinstance(raw_faults, list):
            raise ChatProtocolError("fault_nodes is not a list")
        for item in raw_faults:
            if not isinstance(item, dict):
                continue
            node = item.get("node")
            if node not in plan.graph.nodes:
                continue
            try:
                kind = FailureKind(item.get("kind", "other"))
            except ValueError:
                kind = FailureKind.OTHER
            raw_evidence = item.get("evidence", [])
            evidence = tuple(e for e in raw_evidence if isinstance(e, str))[:3] \
                if isinstance(raw_evidence, list) else ()
            faults.append(FaultAttribution(node_id=node, kind=kind, evidence=evidence))
        action = None
        raw_action = payload.get("suggested_action")
        if isinstance(raw_action, str):
            try:
                action = ActionKind(raw_action)
            except ValueError:
                action = None
        return SemanticGradient(
            critique_text=reply, fault_nodes=tuple(faults), suggested_action=action
        )

    def propose(self, master: MasterPrompt, gradient: SemanticGradient,
                plan: ExecutionPlan, feedback: str | None = None) -> ExecutionPlan:
        user = (
            f"Current plan:\n{serialize_plan(plan).decode('utf-8')}\n\n"
            f"Critique:\n{gradient.critique_text}"
        )
        if feedback:
            user += f"\n\nYour previous proposal was rejected: {feedback}"
        reply = self._ask(master.text + "\n\n" + _PROPOSE_INSTRUCTIONS, user)
        payload = _first_json_object(reply)
        if payload is None:
            raise ProposalError("proposal reply carries no JSON object")
        try:
            if "edits" in payload:
                return apply_edit_script(plan, payload)
            return parse_plan(json.dumps(payload))
        except PlanError as exc:
            raise ProposalError(str(exc)) from exc
