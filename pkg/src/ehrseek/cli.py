"""Single entry point: fixture generation, benchmark building/verification,
agent and curated-baseline runs, evaluation, reporting, and dataset export.

Exit codes: 0 on success, 1 on a domain error (the module error code is
printed), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import httpx

from . import bench, evaluation, fixtures, sft
from .config import (
    ENV_IMAGING_TOKEN,
    ENV_SEARCH_URL,
    budget_from,
    load_config_file,
    resolve_endpoint,
)
from .core import (
    DomainError,
    TaskInstance,
    read_trajectories,
    validate_trajectory,
    write_trajectories,
)
from .imaging import RemoteImagingBackend, StubImagingBackend
from .knowledge import CachedCorpusBackend, LiveSearchBackend
from .registry import ToolRegistry
from .runtime import (
    LlmPolicy,
    call,
    finish,
    run_batch,
    scripted_policy,
    stderr_progress,
)
from .store import read_manifest

DEMO_SCRIPTS = {
    "demo": [
        call("ehr.load_ehr"),
        call("ehr.get_table_names"),
        call("ehr.get_latest_records", table="labevents"),
        call("ehr.run_sql_query", sql="SELECT COUNT(*) AS n FROM labevents"),
        finish(["yes"]),
    ],
    "finisher": [finish(["yes"])],
    "loop": [call("ehr.load_ehr"), call("ehr.get_table_names")],
    "think-finish": [call("ehr.think", note="nothing left to check"), finish(["x"])],
}


def _build_policy(spec: str, config_data: dict):
    kind, _, name = spec.partition(":")
    if kind == "scripted":
        if name not in DEMO_SCRIPTS:
            raise DomainError(
                "malformed_input",
                f"unknown script {name!r}; available: {', '.join(sorted(DEMO_SCRIPTS))}",
            )
        return scripted_policy(DEMO_SCRIPTS[name], policy_id=f"scripted:{name}")
    if kind == "llm":
        endpoint = resolve_endpoint(name or "default", config_data)
        return LlmPolicy(endpoint=endpoint, policy_id=f"llm:{name or 'default'}")
    raise DomainError("malformed_input", f"policy must be scripted:<name> or llm:<profile>, got {spec!r}")


def _build_knowledge(spec: str | None):
    if spec is None:
        return None
    if spec.startswith("cache:"):
        return CachedCorpusBackend(spec[len("cache:"):])
    if spec == "live":
        url = os.environ.get(ENV_SEARCH_URL)
        if not url:
            raise DomainError("backend_unavailable", f"--knowledge live needs {ENV_SEARCH_URL}")
        return LiveSearchBackend(url)
    raise DomainError("malformed_input", f"--knowledge must be cache:<dir> or live, got {spec!r}")


def _build_imaging(spec: str):
    if spec == "stub":
        return StubImagingBackend()
    if spec.startswith(("http://", "https://")):
        return RemoteImagingBackend(spec, token=os.environ.get(ENV_IMAGING_TOKEN))
    raise DomainError("malformed_input", f"--imaging must be stub or a service URL, got {spec!r}")


def _curated_task(item: bench.PairedExample) -> TaskInstance:
    """The one-shot presentation: curated context inlined into the instruction."""
    lines = ["Recent patient events:"]
    lines += [f"{stamp} | {text}" for stamp, text in item.curated.context_events]
    lines += ["", f"Task: {item.curated.instruction}"]
    agentic = item.agentic
    return TaskInstance(
        patient_id=agentic.patient_id,
        cutoff=agentic.cutoff,
        instruction="\n".join(lines),
        modality_meta=agentic.modality_meta,
        answer_schema=agentic.answer_schema,
        task_id=agentic.task_id,
        group=agentic.group,
    )


# ---------------------------------------------------------------------------
# Subcommand handlers

def _cmd_fixture_gen(args: argparse.Namespace) -> int:
    out = fixtures.fixture_generate(args.out, seed=args.seed, n_patients=args.patients,
                                    n_events_per_patient=args.events)
    print(f"wrote fixture store to {out}")
    return 0


def _cmd_fixture_curated(args: argparse.Namespace) -> int:
    examples = bench.fixture_curated(
        args.store, args.out, seed=args.seed, n_examples=args.examples, n_subtasks=args.subtasks
    )
    print(f"wrote {len(examples)} curated examples to {args.out}")
    return 0


def _cmd_bench_build(args: argparse.Namespace) -> int:
    manifest = bench.build_benchmark(
        args.curated, args.out, quota=args.quota, seed=args.seed, manifest_path=args.manifest
    )
    print(json.dumps(manifest.to_dict(), indent=2))
    return 0


def _cmd_bench_verify(args: argparse.Namespace) -> int:
    pairs = list(bench.read_benchmark(args.benchmark))
    if args.limit is not None:
        pairs = pairs[: args.limit]
    failures = 0
    for item in pairs:
        report = bench.verify_pairing(item, args.store)
        status = "ok" if report.ok else "FAIL"
        print(f"{status} {report.task_id} events_retrievable={report.events_retrievable}"
              f" no_post_cutoff_rows={report.no_post_cutoff_rows}")
        if not report.ok:
            failures += 1
            for stamp, text in report.missing_events[:3]:
                print(f"  missing event at {stamp}: {text[:80]}")
            for row in report.leaked_rows[:3]:
                print(f"  leaked row: {row[:80]}")
    print(f"{len(pairs) - failures}/{len(pairs)} pairings verified")
    return 1 if failures else 0


def _run_common(args: argparse.Namespace, curated_mode: bool) -> int:
    config_data = load_config_file(args.config)
    budget = budget_from(config_data, max_rounds_flag=(1 if curated_mode else args.max_rounds))
    policy = _build_policy(args.policy, config_data)
    registry = ToolRegistry(
        store_dir=args.store,
        knowledge_backend=_build_knowledge(args.knowledge),
        imaging_backend=_build_imaging(args.imaging),
        tools_disabled=curated_mode,
    )
    pairs = list(bench.read_benchmark(args.benchmark))
    if curated_mode:
        tasks = [_curated_task(item) for item in pairs]
    else:
        tasks = [item.agentic for item in pairs]
    result = run_batch(
        tasks,
        policy,
        registry,
        budget=budget,
        parallelism=args.parallelism,
        progress=stderr_progress,
    )
    bad = [
        (t.task.task_id, v)
        for t in result.trajectories
        for v in validate_trajectory(t, max_rounds=budget.max_rounds)
    ]
    if bad:
        raise DomainError("malformed_input", f"runtime produced invalid trajectories: {bad[:3]}")
    write_trajectories(args.out, result.trajectories)
    print(f"wrote {len(result.trajectories)} trajectories to {args.out}"
          f" (peak concurrency {result.peak_concurrency})")
    return 0


def _cmd_run_agentic(args: argparse.Namespace) -> int:
    return _run_common(args, curated_mode=False)


def _cmd_run_curated(args: argparse.Namespace) -> int:
    return _run_common(args, curated_mode=True)


def _gold_by_task(benchmark_path: str) -> dict[str, tuple[str, ...]]:
    return {
        item.curated.task_id: item.curated.gold_answers
        for item in bench.read_benchmark(benchmark_path)
    }


def _cmd_eval_score(args: argparse.Namespace) -> int:
    gold = _gold_by_task(args.benchmark)
    records = []
    skipped = 0
    for trajectory in read_trajectories(args.trajectories):
        expected = gold.get(trajectory.task.task_id)
        if expected is None:
            skipped += 1
            continue
        records.append(evaluation.score_trajectory(trajectory, expected))
    if not records:
        raise DomainError("empty_input", "no trajectories matched the benchmark")
    report = evaluation.aggregate(records)
    if args.out:
        evaluation.write_report(args.out, report)
    print(evaluation.render_report(report))
    if skipped:
        print(f"({skipped} trajectories had no matching benchmark entry)", file=sys.stderr)
    return 0


def _cmd_eval_report(args: argparse.Namespace) -> int:
    agentic = evaluation.read_report(args.agentic)
    curated = evaluation.read_report(args.curated)
    cells = evaluation.delta_report(agentic, curated)
    print("agentic:")
    print(evaluation.render_report(agentic))
    print("\ncurated:")
    print(evaluation.render_report(curated))
    print("\ndelta (agentic - curated):")
    print(evaluation.render_delta(cells))
    if args.out:
        payload = [
            {"group": c.group, "agentic": c.agentic, "curated": c.curated,
             "delta": c.delta, "sign": c.sign}
            for c in cells
        ]
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return 0


def _cmd_eval_tools(args: argparse.Namespace) -> int:
    report = evaluation.tool_usage(read_trajectories(args.trajectories))
    print(evaluation.render_usage(report))
    if args.out:
        Path(args.out).write_text(
            json.dumps({"counts": report.counts, "shares": report.shares, "total": report.total},
                       indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    return 0


def _cmd_sft_export(args: argparse.Namespace) -> int:
    gold = None
    if args.correct_only:
        if not args.benchmark:
            raise DomainError("malformed_input", "--correct-only needs --benchmark for gold labels")
        gold = _gold_by_task(args.benchmark)
    if args.tokenizer != "approx":
        raise DomainError("malformed_input", f"unknown tokenizer {args.tokenizer!r}; only 'approx' ships built in")
    stats = sft.export_dataset(
        read_trajectories(args.trajectories),
        args.out,
        max_tokens=args.max_tokens,
        gold_by_task=gold,
    )
    print(json.dumps({"kept": stats.kept, "dropped": stats.dropped,
                      "drop_fraction": stats.drop_fraction}))
    return 0


def _cmd_doctor(args: argparse.Namespace) -> int:
    config_data = load_config_file(args.config)
    checks: list[tuple[str, bool, str]] = []

    if args.store:
        try:
            manifest = read_manifest(args.store)
            missing = [
                spec.name for spec in manifest.tables
                if not (Path(args.store) / f"{spec.name}.csv").is_file()
            ]
            if missing:
                checks.append(("store", False, f"missing table files: {', '.join(missing)}"))
            else:
                checks.append(("store", True, f"{len(manifest.tables)} tables"))
        except DomainError as exc:
            checks.append(("store", False, str(exc)))
    else:
        checks.append(("store", True, "not configured (skipped)"))

    try:
        backend = _build_knowledge(args.knowledge)
        if backend is None:
            checks.append(("knowledge", True, "not configured (skipped)"))
        else:
            backend.search("health check", 1)
            checks.append(("knowledge", True, "search responds"))
    except DomainError as exc:
        checks.append(("knowledge", False, str(exc)))

    if args.imaging == "stub":
        checks.append(("imaging", True, "stub backend"))
    else:
        try:
            response = httpx.get(args.imaging.rstrip("/") + "/health", timeout=10.0)
            ok = response.status_code == 200
            checks.append(("imaging", ok, f"/health -> {response.status_code}"))
        except httpx.HTTPError as exc:
            checks.append(("imaging", False, f"/health unreachable: {exc}"))

    if args.endpoint:
        try:
            resolve_endpoint(args.endpoint, config_data)
            checks.append(("endpoint", True, f"profile {args.endpoint!r} resolves"))
        except DomainError as exc:
            checks.append(("endpoint", False, str(exc)))

    failed = False
    for name, ok, detail in checks:
        print(f"{'ok  ' if ok else 'FAIL'} {name}: {detail}")
        failed = failed or not ok
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# Argument parsing

def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--benchmark", required=True, help="paired benchmark JSONL")
    parser.add_argument("--out", required=True, help="output trajectories JSONL")
    parser.add_argument("--policy", required=True, help="scripted:<name> or llm:<profile>")
    parser.add_argument("--store", default=None, help="EHR store directory")
    parser.add_argument("--parallelism", type=int, default=None,
                        help="in-flight episode cap (default 6, or the config file's)")
    parser.add_argument("--max-rounds", type=int, default=None)
    parser.add_argument("--knowledge", default=None, help="cache:<dir> or live")
    parser.add_argument("--imaging", default="stub", help="stub or service URL")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ehrseek", description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)

    fixture = commands.add_parser("fixture", help="synthetic data")
    fixture_sub = fixture.add_subparsers(dest="subcommand", required=True)
    gen = fixture_sub.add_parser("gen", help="generate a synthetic EHR store")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--patients", type=int, required=True)
    gen.add_argument("--events", type=int, required=True)
    gen.add_argument("--out", required=True)
    gen.set_defaults(handler=_cmd_fixture_gen)
    curated = fixture_sub.add_parser("curated", help="derive curated examples from a store")
    curated.add_argument("--store", required=True)
    curated.add_argument("--seed", type=int, required=True)
    curated.add_argument("--examples", type=int, required=True)
    curated.add_argument("--subtasks", type=int, default=5)
    curated.add_argument("--out", required=True)
    curated.set_defaults(handler=_cmd_fixture_curated)

    bench_cmd = commands.add_parser("bench", help="benchmark files")
    bench_sub = bench_cmd.add_subparsers(dest="subcommand", required=True)
    build = bench_sub.add_parser("build", help="pair curated examples into a benchmark")
    build.add_argument("--curated", required=True)
    build.add_argument("--out", required=True)
    build.add_argument("--quota", type=int, default=None)
    build.add_argument("--seed", type=int, default=0)
    build.add_argument("--manifest", default=None)
    build.set_defaults(handler=_cmd_bench_build)
    verify = bench_sub.add_parser("verify", help="verify pairings against a store")
    verify.add_argument("--benchmark", required=True)
    verify.add_argument("--store", required=True)
    verify.add_argument("--limit", type=int, default=None)
    verify.set_defaults(handler=_cmd_bench_verify)

    run = commands.add_parser("run", help="execute episodes")
    run_sub = run.add_subparsers(dest="subcommand", required=True)
    agentic = run_sub.add_parser("agentic", help="evidence-seeking episodes with tools")
    _add_run_flags(agentic)
    agentic.set_defaults(handler=_cmd_run_agentic)
    curated_run = run_sub.add_parser("curated", help="one-shot baseline from curated context")
    _add_run_flags(curated_run)
    curated_run.set_defaults(handler=_cmd_run_curated)

    eval_cmd = commands.add_parser("eval", help="score and report")
    eval_sub = eval_cmd.add_subparsers(dest="subcommand", required=True)
    score = eval_sub.add_parser("score", help="score trajectories against gold labels")
    score.add_argument("--trajectories", required=True)
    score.add_argument("--benchmark", required=True)
    score.add_argument("--out", default=None, help="report JSON path")
    score.set_defaults(handler=_cmd_eval_score)
    report = eval_sub.add_parser("report", help="delta table between two score reports")
    report.add_argument("--agentic", required=True)
    report.add_argument("--curated", required=True)
    report.add_argument("--out", default=None)
    report.set_defaults(handler=_cmd_eval_report)
    tools = eval_sub.add_parser("tools", help="tool-call distribution")
    tools.add_argument("--trajectories", required=True)
    tools.add_argument("--out", default=None)
    tools.set_defaults(handler=_cmd_eval_tools)

    sft_cmd = commands.add_parser("sft", help="training-data export")
    sft_sub = sft_cmd.add_subparsers(dest="subcommand", required=True)
    export = sft_sub.add_parser("export", help="render finished trajectories to a dataset")
    export.add_argument("--trajectories", required=True)
    export.add_argument("--out", required=True)
    export.add_argument("--max-tokens", type=int, default=sft.DEFAULT_MAX_TOKENS)
    export.add_argument("--tokenizer", default="approx")
    export.add_argument("--correct-only", action="store_true")
    export.add_argument("--benchmark", default=None)
    export.set_defaults(handler=_cmd_sft_export)

    doctor = commands.add_parser("doctor", help="check backends and fixtures before a long run")
    doctor.add_argument("--store", default=None)
    doctor.add_argument("--knowledge", default=None)
    doctor.add_argument("--imaging", default="stub")
    doctor.add_argument("--endpoint", default=None)
    doctor.add_argument("--config", default=None)
    doctor.set_defaults(handler=_cmd_doctor)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except DomainError as exc:
        print(f"error [{exc.code}]: {exc.message}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error [io_failure]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
