"""Command-line front end.

Subcommands: ``compile`` (improve a plan against a training batch),
``run`` (execute a plan over tasks), ``eval`` (score saved traces),
``pac`` (sample-size tables), ``replay-appendix`` (the scripted fixture
replay), and ``experiment`` (the bench suites). Every command exits 0 on
success and nonzero with a one-line JSON error envelope on stderr
otherwise, and writes artifacts only under the path it was given.

Settings resolve as flags > config file > environment > defaults. The
only secret is the API key for HTTP backends, which is read from the
environment variable named in the config (never from a flag).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Sequence

from . import expr
from .agents import (
    ChatEndpoint,
    FamilyBlueprint,
    FixedWrongValue,
    HttpChatStudent,
    HttpChatTeacher,
    NoisyStudent,
    RuleBasedTeacher,
    SubtaskErrorProfile,
)
from .bench import (
    CRATE_TEMPLATE,
    GIFT_TEMPLATE,
    ExperimentConfig,
    render_report_csv,
    replay_appendix,
    run_experiment_architecture,
    run_experiment_mixed,
    run_experiment_samplesize,
    write_report,
)
from .executor import (
    TaskSample,
    number_from_jsonable,
    read_traces_jsonl,
    run_batch,
    write_traces_jsonl,
)
from .optimizer import (
    ActionKind,
    OptimizationAborted,
    OptimizerConfig,
    optimize,
    run_record_to_jsonable,
)
from .pac import PacQuery
from .plan import parse_plan, serialize_plan
from .risk import LossConfig, answers_match, batch_risk, trace_cost

TASKS_SCHEMA_ID = "flowc-tasks/1"
PARALLELISM_ENV = "FLOWC_PARALLELISM"

_EPILOG = """\
configuration precedence: flags > --config file > environment > defaults.
environment: FLOWC_PARALLELISM sets the default worker count; HTTP
backends read their API key from the variable named by the config's
api_key_env entry (default FLOWC_API_KEY). Secrets are never flags.
"""


# --------------------------------------------------------------------------
# Task file format


def read_tasks_jsonl(path: str | Path) -> list[TaskSample]:
    tasks = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            doc = json.loads(line)
            if doc.get("schema") != TASKS_SCHEMA_ID:
                raise ValueError(
                    f"{path}:{lineno}: unsupported task schema "
                    f"{doc.get('schema')!r}, expected {TASKS_SCHEMA_ID!r}"
                )
            for key in ("task_id", "prompt_text", "gold_answer"):
                if key not in doc:
                    raise ValueError(f"{path}:{lineno}: task is missing {key!r}")
            tasks.append(TaskSample(
                task_id=doc["task_id"],
                prompt_text=doc["prompt_text"],
                gold_answer=number_from_jsonable(doc["gold_answer"]),
                family_tag=doc.get("family_tag", ""),
            ))
    if not tasks:
        raise ValueError(f"no tasks in {path}")
    return tasks


def write_tasks_jsonl(path: str | Path, tasks: Sequence[TaskSample]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for task in tasks:
            handle.write(json.dumps({
                "schema": TASKS_SCHEMA_ID,
                "task_id": task.task_id,
                "prompt_text": task.prompt_text,
                "gold_answer": expr.to_jsonable(task.gold_answer),
                "family_tag": task.family_tag,
            }, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Config file and backend factories


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValueError(f"config {path} must be a JSON object")
    return doc


def _blueprints(cfg: dict) -> dict[str, FamilyBlueprint]:
    out = {
        GIFT_TEMPLATE.family_tag: GIFT_TEMPLATE.blueprint(),
        CRATE_TEMPLATE.family_tag: CRATE_TEMPLATE.blueprint(),
    }
    for tag, raw in cfg.get("families", {}).items():
        out[tag] = FamilyBlueprint(slots=tuple(raw["slots"]), formula=raw["formula"])
    return out


def _endpoint(raw: dict) -> ChatEndpoint:
    for key in ("base_url", "model"):
        if key not in raw:
            raise ValueError(f"http backend config is missing {key!r}")
    return ChatEndpoint(
        base_url=raw["base_url"],
        model=raw["model"],
        api_key_env=raw.get("api_key_env", "FLOWC_API_KEY"),
        timeout=raw.get("timeout", 30.0),
        max_retries=raw.get("max_retries", 3),
        backoff_base=raw.get("backoff_base", 0.5),
        max_in_flight=raw.get("max_in_flight", 4),
        log_path=raw.get("log_path"),
    )


def _build_student(cfg: dict):
    raw = cfg.get("student", {})
    kind = raw.get("kind", "noisy")
    if kind == "noisy":
        profile = SubtaskErrorProfile(
            arithmetic_error_p=raw.get("arithmetic_error_p", 0.0),
            parse_error_p=raw.get("parse_error_p", 0.0),
            wrong_policy=FixedWrongValue(raw.get("wrong_value", 0)),
        )
        return NoisyStudent(raw.get("seed", 0), _blueprints(cfg), profile)
    if kind == "http":
        return HttpChatStudent(_endpoint(raw))
    raise ValueError(f"unknown student kind {kind!r}")


def _build_teacher(cfg: dict, train: Sequence[TaskSample]):
    raw = cfg.get("teacher", {})
    kind = raw.get("kind", "rule")
    if kind == "rule":
        actions = raw.get("actions")
        if actions is not None:
            actions = [ActionKind(a) for a in actions]
        return RuleBasedTeacher(_blueprints(cfg), train, actions=actions)
    if kind == "http":
        return HttpChatTeacher(_endpoint(raw))
    raise ValueError(f"unknown teacher kind {kind!r}")


def _close_quietly(backend: object) -> None:
    close = getattr(backend, "close", None)
    if callable(close):
        close()


def _resolve_parallelism(flag_value: int | None, cfg: dict) -> int:
    if flag_value is not None:
        return flag_value
    if "parallelism" in cfg:
        return int(cfg["parallelism"])
    from_env = os.environ.get(PARALLELISM_ENV)
    if from_env is not None:
        try:
            return int(from_env)
        except ValueError:
            raise ValueError(
                f"{PARALLELISM_ENV} must be an integer, got {from_env!r}"
            ) from None
    return 1


def _optimizer_config(cfg: dict, args: argparse.Namespace) -> OptimizerConfig:
    raw = cfg.get("optimizer", {})
    return OptimizerConfig(
        epsilon=args.epsilon if args.epsilon is not None else raw.get("epsilon", 0.0),
        max_epochs=(args.max_epochs if args.max_epochs is not None
                    else raw.get("max_epochs", 8)),
        tabu_enabled=args.tabu or raw.get("tabu_enabled", False),
        tabu_capacity=raw.get("tabu_capacity", 64),
        proposal_retries=raw.get("proposal_retries", 3),
        task_parallelism=_resolve_parallelism(args.parallelism, cfg),
    )


def _dump_json(path: Path, doc: object) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")


# --------------------------------------------------------------------------
# Subcommands


def _cmd_compile(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    plan = parse_plan(Path(args.plan).read_bytes())
    train = read_tasks_jsonl(args.train)
    out = Path(args.out)
    epochs_dir = out / "epochs"
    epochs_dir.mkdir(parents=True, exist_ok=True)

    def checkpoint(epoch, best, best_risk, candidate):
        _dump_json(epochs_dir / f"epoch-{epoch:03d}.json", {
            "epoch": epoch,
            "best_risk": best_risk,
            "best_plan_id": best.plan_id,
            "candidate": (None if candidate is None
                          else json.loads(serialize_plan(candidate))),
        })

    student = _build_student(cfg)
    teacher = _build_teacher(cfg, train)
    try:
        best, record = optimize(plan, train, student, teacher,
                                config=_optimizer_config(cfg, args),
                                observer=checkpoint)
    except OptimizationAborted as exc:
        _dump_json(out / "run-record.json", run_record_to_jsonable(exc.record))
        (out / "best-plan.json").write_bytes(serialize_plan(exc.best_plan) + b"\n")
        raise
    finally:
        _close_quietly(student)
        _close_quietly(teacher)
    _dump_json(out / "run-record.json", run_record_to_jsonable(record))
    (out / "best-plan.json").write_bytes(serialize_plan(best) + b"\n")
    print(json.dumps({
        "outcome": record.outcome.value,
        "initial_risk": record.initial_risk,
        "best_risk": record.best_risk,
        "epochs": len(record.epochs),
        "evaluations": record.evaluations,
        "proposals": record.proposals,
        "out": str(out),
    }, sort_keys=True))
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    plan = parse_plan(Path(args.plan).read_bytes())
    tasks = read_tasks_jsonl(args.tasks)
    student = _build_student(cfg)
    try:
        traces = run_batch(plan, tasks, student,
                           task_parallelism=_resolve_parallelism(args.parallelism, cfg))
    finally:
        _close_quietly(student)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    write_traces_jsonl(out, traces)
    print(json.dumps({
        "tasks": len(tasks),
        "ok": sum(1 for t in traces if t.ok),
        "risk": batch_risk(traces, [t.gold_answer for t in tasks]),
        "out": str(out),
    }, sort_keys=True))
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    traces = read_traces_jsonl(args.traces)
    tasks = read_tasks_jsonl(args.tasks)
    by_id = {t.task_id: t for t in tasks}
    unknown = [t.task_id for t in traces if t.task_id not in by_id]
    if unknown:
        raise ValueError(f"traces reference tasks not in the task file: {unknown[:5]}")
    if not traces:
        raise ValueError("no traces to score")
    golds = [by_id[t.task_id].gold_answer for t in traces]
    correct = sum(1 for t, g in zip(traces, golds)
                  if t.ok and answers_match(t.final_answer, g))
    loss_config = LossConfig(cost_weight=args.cost_weight,
                             cost_normalizer=args.cost_normalizer)
    print(json.dumps({
        "tasks": len(traces),
        "accuracy": correct / len(traces),
        "risk": batch_risk(traces, golds, loss_config),
        "mean_token_cost": sum(trace_cost(t) for t in traces) / len(traces),
    }, sort_keys=True))
    return 0


def _parse_int_series(text: str) -> list[int]:
    """Accepts ``3``, ``1..10`` (inclusive), or ``1,3,9``."""
    if ".." in text:
        low, _, high = text.partition("..")
        values = list(range(int(low), int(high) + 1))
    elif "," in text:
        values = [int(part) for part in text.split(",") if part]
    else:
        values = [int(text)]
    if not values:
        raise ValueError(f"no values in {text!r}")
    return values


def _cmd_pac(args: argparse.Namespace) -> int:
    if (args.k is None) == (args.hypotheses is None):
        raise ValueError("pass exactly one of --k and --hypotheses")
    if args.k is not None:
        print("k\thypotheses\tsamples")
        for k in _parse_int_series(args.k):
            query = PacQuery(args.epsilon, args.delta, subtask_types=k)
            print(f"{k}\t{query.class_size()}\t{query.sample_bound()}")
    else:
        query = PacQuery(args.epsilon, args.delta, hypothesis_count=args.hypotheses)
        print("hypotheses\tsamples")
        print(f"{query.class_size()}\t{query.sample_bound()}")
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    report = replay_appendix()
    for note in report.notes:
        print(note)
    sys.stdout.write(render_report_csv(report))
    if args.out:
        write_report(report, args.out)
    return 0


_SUITES = {
    "architecture": run_experiment_architecture,
    "samplesize": run_experiment_samplesize,
    "mixed": run_experiment_mixed,
}


def _cmd_experiment(args: argparse.Namespace) -> int:
    cfg_file = _load_config(args.config)
    raw = cfg_file.get("experiment", {})
    defaults = ExperimentConfig()

    def pick(flag_value, key, fallback):
        return flag_value if flag_value is not None else raw.get(key, fallback)

    if args.m_values is not None:
        m_values = tuple(_parse_int_series(args.m_values))
    else:
        m_values = tuple(raw.get("m_values", defaults.m_values))
    templates = ((GIFT_TEMPLATE, CRATE_TEMPLATE) if args.suite == "mixed"
                 else (GIFT_TEMPLATE,))
    cfg = ExperimentConfig(
        templates=templates,
        seed=pick(args.seed, "seed", defaults.seed),
        runs=pick(args.runs, "runs", defaults.runs),
        train_size=pick(args.train_size, "train_size", defaults.train_size),
        test_size=pick(args.test_size, "test_size", defaults.test_size),
        m_values=m_values,
        max_epochs=pick(args.max_epochs, "max_epochs", defaults.max_epochs),
        arithmetic_error_p=pick(args.arithmetic_error_p, "arithmetic_error_p",
                                defaults.arithmetic_error_p),
        parse_error_p=pick(args.parse_error_p, "parse_error_p",
                           defaults.parse_error_p),
        task_parallelism=_resolve_parallelism(args.parallelism, cfg_file),
    )
    report = _SUITES[args.suite](cfg)
    sys.stdout.write(render_report_csv(report))
    if args.out:
        write_report(report, args.out)
    return 0


# --------------------------------------------------------------------------
# Parser and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowc",
        description="Compile, execute, and study node-typed execution plans.",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    compile_p = sub.add_parser(
        "compile", help="improve a plan against a training batch")
    compile_p.add_argument("--plan", required=True, help="starting plan JSON")
    compile_p.add_argument("--train", required=True, help="training tasks JSONL")
    compile_p.add_argument("--config", help="backend and optimizer config JSON")
    compile_p.add_argument("--out", required=True, help="run artifact directory")
    compile_p.add_argument("--epsilon", type=float, help="risk target")
    compile_p.add_argument("--max-epochs", type=int, dest="max_epochs")
    compile_p.add_argument("--tabu", action="store_true",
                           help="skip candidates already evaluated")
    compile_p.add_argument("--parallelism", type=int, help="worker count")
    compile_p.set_defaults(handler=_cmd_compile)

    run_p = sub.add_parser("run", help="execute a plan over a task file")
    run_p.add_argument("--plan", required=True)
    run_p.add_argument("--tasks", required=True)
    run_p.add_argument("--config")
    run_p.add_argument("--out", required=True, help="traces JSONL to write")
    run_p.add_argument("--parallelism", type=int)
    run_p.set_defaults(handler=_cmd_run)

    eval_p = sub.add_parser("eval", help="score saved traces against tasks")
    eval_p.add_argument("--traces", required=True)
    eval_p.add_argument("--tasks", required=True)
    eval_p.add_argument("--cost-weight", type=float, default=0.0,
                        dest="cost_weight")
    eval_p.add_argument("--cost-normalizer", type=float, default=1000.0,
                        dest="cost_normalizer")
    eval_p.set_defaults(handler=_cmd_eval)

    pac_p = sub.add_parser("pac", help="sample-size tables")
    pac_p.add_argument("--epsilon", type=float, required=True)
    pac_p.add_argument("--delta", type=float, required=True)
    pac_p.add_argument("--k", help="subtask-type counts: 3, 1..10, or 1,3,9")
    pac_p.add_argument("--hypotheses", type=int,
                       help="explicit finite class size instead of --k")
    pac_p.set_defaults(handler=_cmd_pac)

    replay_p = sub.add_parser(
        "replay-appendix", help="replay the two saved consensus plans")
    replay_p.add_argument("--out", help="also write the report here")
    replay_p.set_defaults(handler=_cmd_replay)

    exp_p = sub.add_parser("experiment", help="run a bench suite")
    exp_p.add_argument("--suite", required=True, choices=sorted(_SUITES))
    exp_p.add_argument("--config")
    exp_p.add_argument("--out", help="report directory")
    exp_p.add_argument("--seed", type=int)
    exp_p.add_argument("--runs", type=int)
    exp_p.add_argument("--train-size", type=int, dest="train_size")
    exp_p.add_argument("--test-size", type=int, dest="test_size")
    exp_p.add_argument("--m-values", dest="m_values",
                       help="batch sizes: 3, 3..10, or 3,5,10")
    exp_p.add_argument("--max-epochs", type=int, dest="max_epochs")
    exp_p.add_argument("--arithmetic-error-p", type=float,
                       dest="arithmetic_error_p")
    exp_p.add_argument("--parse-error-p", type=float, dest="parse_error_p")
    exp_p.add_argument("--parallelism", type=int)
    exp_p.set_defaults(handler=_cmd_experiment)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except Exception as exc:  # the envelope is the scripting contract
        envelope = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(envelope, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
