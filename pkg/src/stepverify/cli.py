"""Command-line pipeline driver: sample, verify, train, select, and reports."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import threading
from pathlib import Path
from typing import Any, Sequence

from .aggregator import (
    AggregatorModel,
    ImbalanceError,
    TrainingConfig,
    build_training_set,
    train,
)
from .config import ConfigError, RunConfig, apply_overrides, load_config, resolve_path
from .core import (
    Problem,
    Trajectory,
    decompose_heuristic,
    decompose_llm,
    label_trajectory,
    load_problems,
)
from .llm import HttpBackend, LlmClient, LlmError, MockBackend, sample_cot
from .prompting import PromptSet, render
from .prove import VerifierServices, verify_trajectory
from .repl import ReplPool, WorkerConfig
from .scoring import (
    ConstantPrm,
    EnsembleStrategy,
    MockPrm,
    RemotePrm,
    majority_vote,
    pass_at_k,
    score_trajectory,
    select_best_of_n,
)
from .store import (
    RunStore,
    export_formalstep,
    file_sha256,
    is_state_fixture,
    load_state_fixture,
    proof_rate_curve,
    read_export,
    read_jsonl,
    read_trajectories,
    stats,
    step_records_from_trajectories,
    write_trajectories,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2


class CliError(Exception):
    """Operational failure with a message for the operator."""


class UsageError(CliError):
    """Bad invocation: missing inputs, malformed arguments."""


def _build_backend(config: RunConfig) -> Any:
    backends = config.backends
    if backends.mode == "mock":
        if backends.mock_script:
            return MockBackend.from_script(resolve_path(backends.mock_script), synthesize=True)
        return MockBackend(synthesize=True)
    if backends.mode == "live":
        import os

        if not backends.endpoint_url:
            raise ConfigError("backends.mode is 'live' but backends.endpoint_url is empty")
        return HttpBackend(
            backends.endpoint_url,
            api_key=os.environ.get(backends.api_key_env),
            timeout_seconds=backends.timeout_seconds,
        )
    raise ConfigError(f"unknown backends.mode {backends.mode!r}")


def _build_clients(config: RunConfig, backend: Any) -> dict[str, LlmClient]:
    backends = config.backends
    limiter = threading.BoundedSemaphore(backends.max_concurrency)
    common = dict(
        max_retries=backends.max_retries,
        backoff_seconds=backends.backoff_seconds,
        limiter=limiter,
        temperature=backends.temperature,
        max_tokens=backends.max_tokens,
    )
    return {
        "reasoner": LlmClient(backend, model=backends.reasoning_model, **common),
        "formalizer": LlmClient(backend, model=backends.formalizer_model, **common),
        "prover": LlmClient(backend, model=backends.prover_model, **common),
    }


def _build_repl(config: RunConfig) -> ReplPool:
    repl = config.repl
    worker_config = WorkerConfig(
        launch_command=tuple(config.repl_launch_command()),
        project_root=repl.project_root or None,
        max_commands_per_worker=repl.max_commands_per_worker,
        init_commands=tuple(c.strip() for c in repl.init_commands.split(";") if c.strip()),
    )
    size = repl.pool_size or None
    return ReplPool(worker_config, size=size)


def _build_prm(config: RunConfig) -> Any:
    prm = config.prm
    if prm.mode == "constant":
        return ConstantPrm(prm.constant_value)
    if prm.mode == "mock":
        if prm.scores_file:
            return MockPrm.from_file(resolve_path(prm.scores_file))
        return MockPrm()
    if prm.mode == "remote":
        if not prm.endpoint_url:
            raise ConfigError("prm.mode is 'remote' but prm.endpoint_url is empty")
        return RemotePrm(
            prm.endpoint_url, timeout_seconds=prm.timeout_seconds, on_error=prm.on_error
        )
    raise ConfigError(f"unknown prm.mode {prm.mode!r}")


def _load_problem_file(path: str) -> list[Problem]:
    resolved = Path(resolve_path(path))
    if not resolved.exists():
        raise UsageError(f"problem file not found: {resolved}")
    return load_problems(read_jsonl(resolved))


def _read_records(path: str) -> list[Trajectory]:
    resolved = Path(resolve_path(path))
    if not resolved.exists():
        raise UsageError(f"records file not found: {resolved}")
    return read_trajectories(resolved)


def _group_by_problem(trajectories: Sequence[Trajectory]) -> dict[str, list[Trajectory]]:
    groups: dict[str, list[Trajectory]] = {}
    for trajectory in trajectories:
        groups.setdefault(trajectory.problem_id, []).append(trajectory)
    return groups


def _store_for(config: RunConfig, dataset_path: str = "") -> RunStore:
    hashes = {}
    if dataset_path:
        resolved = Path(resolve_path(dataset_path))
        if resolved.exists():
            hashes[resolved.name] = file_sha256(resolved)
    seeds = {"run": config.run.seed}
    identity = json.dumps(
        {"config": config.identity(), "seeds": seeds, "fixtures": hashes},
        sort_keys=True,
    )
    return RunStore.create(
        config.run.out_dir,
        config_snapshot=config.snapshot(),
        seeds=seeds,
        fixture_hashes=hashes,
        run_id=hashlib.sha256(identity.encode("utf-8")).hexdigest()[:12],
    )


# ---- subcommands ------------------------------------------------------------


def cmd_sample(args: argparse.Namespace, config: RunConfig) -> int:
    problems = _load_problem_file(args.dataset)
    n = config.run.samples_per_problem
    if args.dry_run:
        print(f"plan: sample {n} completions for each of {len(problems)} problems "
              f"({len(problems)} requests), decomposition={config.run.decomposition}, "
              f"backend={config.backends.mode}")
        return EXIT_OK
    store = _store_for(config, args.dataset)
    backend = _build_backend(config)
    clients = _build_clients(config, backend)
    prompts = PromptSet.bundled()
    out_path = store.trajectories_path(Path(args.dataset).stem, config.backends.reasoning_model)
    if args.out:
        out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("", encoding="utf-8")
    count = 0
    failed = 0
    for problem in problems:
        try:
            trajectories = sample_cot(
                problem, n, clients["reasoner"], system_prompt=prompts.cot_system
            )
        except LlmError as exc:
            failed += 1
            print(f"problem {problem.id}: sampling failed ({exc})", file=sys.stderr)
            continue
        for trajectory in trajectories:
            if config.run.decomposition == "llm":
                trajectory.steps = decompose_llm(
                    trajectory.raw_text,
                    clients["reasoner"],
                    prompt_template=prompts.decompose,
                )
            else:
                trajectory.steps = decompose_heuristic(trajectory.raw_text)
            label_trajectory(trajectory, problem)
        # Append per problem so an interrupted run keeps a readable prefix.
        count += write_trajectories(out_path, trajectories, append=True, run_id=store.run_id)
    print(f"wrote {count} trajectories to {out_path}"
          + (f" ({failed} problems failed)" if failed else ""))
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, config: RunConfig) -> int:
    trajectories = _read_records(args.records)
    problems = {p.id: p for p in _load_problem_file(args.dataset)}
    pending = [t for t in trajectories if t.steps]
    if args.dry_run:
        steps = sum(len(t.steps) for t in pending)
        print(f"plan: verify {steps} steps across {len(pending)} trajectories; "
              f"<= {steps * config.budgets.formalize_attempts} formalization calls, "
              f"<= {steps * config.budgets.prove_budget} proof candidates, "
              f"repl={config.repl.mode}, parallelism={config.run.parallelism}")
        return EXIT_OK
    store = _store_for(config, args.records)
    backend = _build_backend(config)
    clients = _build_clients(config, backend)
    prompts = PromptSet.bundled()
    repl = _build_repl(config)
    services = VerifierServices(
        client=clients["formalizer"],
        prover_client=clients["prover"],
        repl=repl,
        prompts=prompts,
        cache=store.cache,
        formalize_attempts=config.budgets.formalize_attempts,
        prove_budget=config.budgets.prove_budget,
        statement_timeout=config.repl.statement_timeout,
        proof_timeout=config.repl.proof_timeout,
        revalidate=args.revalidate,
        parallelism=config.run.parallelism,
    )
    out_path = Path(args.out) if args.out else store.path("trajectories", "verified.jsonl")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("", encoding="utf-8")
    verified = 0
    try:
        for trajectory in trajectories:
            if not trajectory.steps:
                logger.warning(
                    "trajectory for %s has no steps; skipping", trajectory.problem_id
                )
                continue
            problem = problems.get(trajectory.problem_id)
            if problem is None:
                raise CliError(f"no problem {trajectory.problem_id!r} in {args.dataset}")
            verify_trajectory(problem, trajectory, services)
            verified += write_trajectories(
                out_path, [trajectory], append=True, run_id=store.run_id
            )
    finally:
        repl.close()
    print(f"verified {verified} trajectories -> {out_path}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    trajectories = _read_records(args.records)
    examples, skipped = build_training_set(trajectories)
    if args.dry_run:
        print(f"plan: train on {len(examples)} labeled sequences "
              f"({skipped} skipped), epochs={args.epochs}, seed={config.run.seed}")
        return EXIT_OK
    if not examples:
        raise CliError("no labeled, verified trajectories to train on")
    store = _store_for(config, args.records)
    training = TrainingConfig(
        epochs=args.epochs,
        seed=config.run.seed,
        validation_fraction=args.validation_fraction,
    )
    result = train(examples, training)
    model_path = Path(args.out) if args.out else store.path("model.json")
    result.model.save(str(model_path))
    log_path = model_path.with_name(model_path.stem + "_training_log.csv")
    with open(log_path, "w", encoding="utf-8", newline="") as handle:
        handle.write(
            "# optimizer=adam(beta1=0.9,beta2=0.999,eps=1e-8) "
            f"lr={training.learning_rate} batch={training.batch_size} "
            "loss=bce init=uniform(+-1/sqrt(hidden)) forget_bias=1.0\n"
        )
        writer = csv.DictWriter(
            handle, fieldnames=["epoch", "train_loss", "val_loss", "val_accuracy"]
        )
        writer.writeheader()
        writer.writerows({**row, "epoch": int(row["epoch"])} for row in result.history)
    print(
        f"trained on {len(examples)} examples ({skipped} skipped); "
        f"val_accuracy={result.final_val_accuracy:.4f}; "
        f"model {result.model.model_hash()[:12]} -> {model_path}"
    )
    return EXIT_OK


_TABLE_COLUMNS = ["zs_cot@1", "majority@n", "lstm_only", "ensemble", "pass@n"]


def selection_table(
    groups: dict[str, list[Trajectory]],
    model: AggregatorModel,
    scorer: Any,
    problems: dict[str, Problem],
    *,
    alpha: float,
    strategy: EnsembleStrategy,
    reduce: str,
    tie_break: str,
) -> tuple[dict[str, float], list[dict[str, Any]]]:
    """Per-method accuracy plus one selection record per problem.

    The majority answer scores a hit when any trajectory carrying an
    equivalent answer is labeled correct, so no ground-truth lookup is
    needed beyond the labels already on the records.
    """
    from .aggregator import tokens_from_states
    from .core import answers_equivalent

    hits = {column: 0 for column in _TABLE_COLUMNS}
    selections: list[dict[str, Any]] = []
    for problem_id in sorted(groups):
        trajectories = groups[problem_id]
        problem = problems.get(problem_id)
        statement = problem.statement if problem else ""
        retro_scores = []
        for trajectory in trajectories:
            if trajectory.states is None:
                raise CliError(f"trajectory for {problem_id} is unverified; run verify first")
            retro = model.forward(tokens_from_states(trajectory.states))
            retro_scores.append(retro)
            score_trajectory(
                trajectory,
                retro,
                scorer,
                problem_statement=statement,
                alpha=alpha,
                strategy=strategy,
                reduce=reduce,
            )
        chosen = select_best_of_n(trajectories)
        lstm_only = max(range(len(trajectories)), key=lambda i: (retro_scores[i], -i))
        majority = majority_vote(trajectories, tie_break=tie_break)
        majority_hit = majority is not None and any(
            t.extracted_answer is not None
            and answers_equivalent(t.extracted_answer, majority)
            and bool(t.is_correct)
            for t in trajectories
        )
        hits["zs_cot@1"] += bool(trajectories[0].is_correct)
        hits["majority@n"] += majority_hit
        hits["lstm_only"] += bool(trajectories[lstm_only].is_correct)
        hits["ensemble"] += bool(trajectories[chosen].is_correct)
        hits["pass@n"] += pass_at_k(trajectories, len(trajectories))
        selections.append(
            {
                "problem_id": problem_id,
                "selected_index": chosen,
                "selected_answer": trajectories[chosen].extracted_answer,
                "selected_correct": trajectories[chosen].is_correct,
                "majority_answer": majority,
                "scores": [t.scores for t in trajectories],
            }
        )
    accuracy = {column: hits[column] / len(groups) for column in _TABLE_COLUMNS}
    return accuracy, selections


def cmd_select(args: argparse.Namespace, config: RunConfig) -> int:
    trajectories = _read_records(args.records)
    groups = _group_by_problem(trajectories)
    if args.dry_run:
        print(f"plan: select over {len(groups)} problems "
              f"({len(trajectories)} trajectories), strategy={config.scoring.strategy}, "
              f"alpha={config.scoring.alpha}")
        return EXIT_OK
    problems = {p.id: p for p in _load_problem_file(args.dataset)} if args.dataset else {}
    model = AggregatorModel.load(resolve_path(args.model))
    scorer = _build_prm(config)
    strategy = EnsembleStrategy(config.scoring.strategy)
    accuracy, selections = selection_table(
        groups,
        model,
        scorer,
        problems,
        alpha=config.scoring.alpha,
        strategy=strategy,
        reduce=config.prm.reduce,
        tie_break=config.scoring.majority_tie_break,
    )
    header = "\t".join(_TABLE_COLUMNS)
    values = "\t".join(f"{accuracy[c]:.4f}" for c in _TABLE_COLUMNS)
    table_text = header + "\n" + values + "\n"
    print(table_text, end="")
    if args.out:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(table_text, encoding="utf-8")
        selections_path = out_path.with_name(out_path.stem + "_selections.jsonl")
        with open(selections_path, "w", encoding="utf-8") as handle:
            for record in selections:
                handle.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n")
    return EXIT_OK


def _step_records(path: str) -> list[Any]:
    resolved = Path(resolve_path(path))
    if not resolved.exists():
        raise UsageError(f"records file not found: {resolved}")
    if is_state_fixture(resolved):
        return list(load_state_fixture(resolved))
    return list(step_records_from_trajectories(read_trajectories(resolved)))


def cmd_stats(args: argparse.Namespace, config: RunConfig) -> int:
    report = stats(_step_records(args.records))
    payload = report.to_dict()
    text = json.dumps(payload, indent=2)
    print(text)
    print(
        f"formalized {report.formalized_count}/{report.formalization_attempted} "
        f"({100 * report.formalization_rate:.1f}%), "
        f"proved {report.proved_count}/{report.formalized_count} "
        f"({100 * report.proof_rate:.1f}%)"
    )
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_export(args: argparse.Namespace, config: RunConfig) -> int:
    trajectories = _read_records(args.records)
    lines = export_formalstep(trajectories)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("".join(lines), encoding="utf-8")
    print(f"exported {len(lines) - 1} statements -> {out_path}")
    return EXIT_OK


def _parse_budgets(text: str) -> list[int]:
    budgets: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            low, high = part.split("..", 1)
            budgets.extend(range(int(low), int(high) + 1))
        elif part:
            budgets.append(int(part))
    if not budgets:
        raise CliError(f"no budgets in {text!r}")
    return budgets


def cmd_curve(args: argparse.Namespace, config: RunConfig) -> int:
    records = _step_records(args.records)
    budgets = _parse_budgets(args.budgets)
    curve = proof_rate_curve(records, budgets)
    lines = ["budget\tproof_rate"]
    for budget, rate in curve:
        lines.append(f"{budget}\t{rate:.6f}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_judge(args: argparse.Namespace, config: RunConfig) -> int:
    resolved = Path(resolve_path(args.export))
    if not resolved.exists():
        raise UsageError(f"export file not found: {resolved}")
    records = read_export(resolved)
    if args.dry_run:
        passes = 2 if args.categories else 1
        print(f"plan: judge {len(records)} statements ({passes * len(records)} requests)")
        return EXIT_OK
    backend = _build_backend(config)
    clients = _build_clients(config, backend)
    prompts = PromptSet.bundled()
    verdicts = {"GOOD": 0, "FAIR": 0, "POOR": 0, "unparsed": 0}
    categories: dict[str, int] = {}
    for record in records:
        prompt = render(
            prompts.judge, step=record.get("step_text", "(not recorded)"),
            statement=record["statement"],
        )
        reply = clients["formalizer"].request(prompt, purpose="judge").choices[0]
        verdict = reply.strip().split()[0].upper() if reply.strip() else ""
        verdicts[verdict if verdict in ("GOOD", "FAIR", "POOR") else "unparsed"] += 1
        if args.categories:
            cat_prompt = render(prompts.judge_category, statement=record["statement"])
            cat_reply = clients["formalizer"].request(cat_prompt, purpose="judge").choices[0]
            label = cat_reply.strip().split()[0].upper() if cat_reply.strip() else "UNPARSED"
            categories[label] = categories.get(label, 0) + 1
    total = len(records)
    report: dict[str, Any] = {"total": total, "verdicts": verdicts}
    if total:
        report["fractions"] = {
            key: verdicts[key] / total for key in ("GOOD", "FAIR", "POOR")
        }
    if args.categories:
        report["categories"] = categories
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


# ---- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stepverify",
        description="Sample, formally verify, score, and select reasoning trajectories.",
    )
    parser.add_argument("--config", help="INI config file; flags override file values")
    parser.add_argument("--out-dir", help="run directory (overrides run.out_dir)")
    parser.add_argument("--seed", type=int, help="run seed (overrides run.seed)")
    parser.add_argument("--parallelism", type=int, help="worker threads (overrides run.parallelism)")
    parser.add_argument("--dry-run", action="store_true", help="print the plan and exit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="draw chain-of-thought solutions per problem")
    p.add_argument("--dataset", required=True, help="problems JSONL (pkg: prefix allowed)")
    p.add_argument("--n", type=int, help="samples per problem (overrides run.samples_per_problem)")
    p.add_argument("--decomposition", choices=["heuristic", "llm"], help="step splitter")
    p.add_argument("--out", help="trajectory JSONL output path")
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser("verify", help="formalize and prove every step")
    p.add_argument("--records", required=True, help="sampled trajectory JSONL")
    p.add_argument("--dataset", required=True, help="problems JSONL for context")
    p.add_argument("--revalidate", action="store_true", help="re-check cached proofs")
    p.add_argument("--prove-budget", type=int, help="overrides budgets.prove_budget")
    p.add_argument("--out", help="verified trajectory JSONL output path")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("train", help="fit the state-sequence scorer")
    p.add_argument("--records", required=True, help="verified trajectory JSONL")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--validation-fraction", type=float, default=0.1)
    p.add_argument("--out", help="model output path")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("select", help="score trajectories and pick one per problem")
    p.add_argument("--records", required=True, help="verified trajectory JSONL")
    p.add_argument("--model", required=True, help="trained scorer file")
    p.add_argument("--dataset", help="problems JSONL (for majority accuracy)")
    p.add_argument("--alpha", type=float, help="overrides scoring.alpha")
    p.add_argument("--strategy", choices=[s.value for s in EnsembleStrategy],
                   help="overrides scoring.strategy")
    p.add_argument("--out", help="selection table output path")
    p.set_defaults(handler=cmd_select)

    p = sub.add_parser("stats", help="step-state distribution report")
    p.add_argument("--records", required=True,
                   help="verified trajectory JSONL or a count-encoded state fixture")
    p.add_argument("--out", help="report JSON output path")
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("export", help="write proved/refuted statements as dataset JSONL")
    p.add_argument("--records", required=True, help="verified trajectory JSONL")
    p.add_argument("--out", required=True, help="export path")
    p.set_defaults(handler=cmd_export)

    p = sub.add_parser("curve", help="proof rate as a function of sampling budget")
    p.add_argument("--records", required=True,
                   help="verified trajectory JSONL or a count-encoded state fixture")
    p.add_argument("--budgets", default="0..16", help="e.g. '1..16' or '1,2,4,8,16'")
    p.add_argument("--out", help="TSV output path")
    p.set_defaults(handler=cmd_curve)

    p = sub.add_parser("judge", help="grade exported statements with an LLM judge")
    p.add_argument("--export", required=True, help="dataset export to grade")
    p.add_argument("--categories", action="store_true", help="also classify topic")
    p.add_argument("--out", help="report JSON output path")
    p.set_defaults(handler=cmd_judge)
    return parser


_FLAG_OVERRIDES = {
    "out_dir": "run.out_dir",
    "seed": "run.seed",
    "parallelism": "run.parallelism",
    "n": "run.samples_per_problem",
    "decomposition": "run.decomposition",
    "prove_budget": "budgets.prove_budget",
    "alpha": "scoring.alpha",
    "strategy": "scoring.strategy",
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        overrides = {
            dotted: getattr(args, flag)
            for flag, dotted in _FLAG_OVERRIDES.items()
            if hasattr(args, flag)
        }
        apply_overrides(config, overrides)
        return args.handler(args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except ImbalanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
