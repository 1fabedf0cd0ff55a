#!/usr/bin/env python3
"""promptforge command line.

Subcommands:
    mutate    generate mutants for every code line of the corpus
    oracle    extract metamorphic oracles from method documentation
    testgen   generate unit tests over a temperature sweep
    ablate    rerun one task for several prompt variants
    report    rebuild the reports from stored records.json files

Usage:
    promptforge mutate --config mutate.toml
    promptforge oracle --config oracle.toml --ground-truth truth.json
    promptforge testgen --config testgen.toml --backend http --model code-davinci-002
    promptforge ablate --config mutate.toml --variants default,nl-only
    promptforge report --config mutate.toml out/davinci out/cushman

Exit codes: 0 success, 1 configuration or input error, 2 backend failure
(or an incomplete run without --allow-partial), 3 adapter failure.
"""

from pathlib import Path
from promptforge.config import load_config
from promptforge.config import TaskConfig
from promptforge.errors import ConfigError
from promptforge.errors import PromptforgeError
from promptforge.pipeline import build_backend
from promptforge.pipeline import load_records
from promptforge.pipeline import load_task_corpus
from promptforge.pipeline import run_pipeline
from promptforge.pipeline import save_records
from promptforge.records import PromptVariant
from promptforge.records import RunRecord
from promptforge.records import SourceUnit
from promptforge.records import Task
from promptforge.reporting import ablation_table
from promptforge.reporting import build_report
from promptforge.reporting import emit_all
from promptforge.reporting import LabelledRun
from promptforge.reporting import run_ablation
from promptforge.reporting import write_report
from promptforge.testgen import measure_coverage
from promptforge.testgen import write_tests
from typing import Any
from typing import NoReturn

import argparse
import logging
import sys


TASK_COMMANDS = {
    "mutate": Task.MUTATION,
    "oracle": Task.ORACLE,
    "testgen": Task.TESTGEN,
}

_TITLES = {
    Task.MUTATION: "Mutation",
    Task.ORACLE: "Oracle generation",
    Task.TESTGEN: "Test generation",
}


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with 1, the configuration error code."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _overrides(args: argparse.Namespace, task: Task | None = None) -> dict[str, Any]:
    overrides: dict[str, Any] = {
        "task": task.value if task else None,
        "variant": getattr(args, "variant", None),
        "backend.kind": args.backend,
        "backend.model": args.model,
        "workers": args.workers,
        "output_dir": args.out,
        "strict": True if args.strict else None,
        "allow_partial": True if args.allow_partial else None,
        "allowlist": args.allowlist,
        "mutation.baseline": args.baseline_mutants,
        "oracle.ground_truth": args.ground_truth,
        "testgen.coverage_map": args.coverage_map,
    }
    return {key: value for key, value in overrides.items() if value is not None}


def _load(args: argparse.Namespace, task: Task | None = None) -> TaskConfig:
    if not args.config.is_file():
        raise ConfigError(f"config file not found: {args.config}")
    return load_config(args.config, _overrides(args, task))


def _corpus(config: TaskConfig) -> list[SourceUnit]:
    corpus = load_task_corpus(config)
    print(f"  Corpus: {len(corpus)} file(s) from {', '.join(config.corpus) or '(no globs)'}")
    return corpus


def _summarize(records: list[RunRecord]) -> int:
    instances = len(records)
    artifacts = sum(len(r.artifacts) for r in records)
    discards = sum(len(r.discards) for r in records)
    incomplete = sum(1 for r in records if r.incomplete)
    print(f"  Instances: {instances}")
    print(f"  Artifacts: {artifacts}")
    print(f"  Discards: {discards}")
    if incomplete:
        print(f"  Incomplete: {incomplete}")
    return incomplete


def _print_paths(paths: list[Path]) -> None:
    for path in paths:
        print(f"  Wrote: {path}")


def _finish(config: TaskConfig, incomplete: int) -> int:
    print("\n=== Done ===")
    if incomplete and not config.allow_partial:
        print(
            f"error: {incomplete} record(s) incomplete (rerun, or pass --allow-partial to accept)",
            file=sys.stderr,
        )
        return 2
    return 0


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def run_task(args: argparse.Namespace) -> int:
    task = TASK_COMMANDS[args.command]
    config = _load(args, task)
    title = _TITLES[task]

    print(f"=== {title}: setup ===")
    print(f"  Config: {args.config}")
    print(f"  Backend: {config.backend.kind} ({config.backend.model})")
    print(f"  Variant: {config.variant}")
    corpus = _corpus(config)
    backend = build_backend(config.backend)

    print(f"\n=== {title}: extraction, prompting and post-processing ===")
    try:
        records = run_pipeline(config, corpus, backend)
    except PromptforgeError as exc:
        if exc.records:
            path = save_records(
                exc.records, config.output_dir, task=task, model=config.backend.model, variant=config.variant
            )
            print(f"  Partial records: {path}")
        raise
    finally:
        close = getattr(backend, "close", None)
        if close is not None:
            close()
    incomplete = _summarize(records)
    _print_paths(
        [save_records(records, config.output_dir, task=task, model=config.backend.model, variant=config.variant)]
    )

    if task is Task.TESTGEN and config.adapter is not None:
        print(f"\n=== {title}: emitted tests ===")
        written = write_tests(records, config.adapter, config.output_dir)
        print(f"  Wrote {sum(len(paths) for paths in written.values())} test unit(s)")
        if config.adapter.coverage_cmd:
            measure_coverage(written, config.adapter, config.output_dir)
            print("  Coverage measured")
        else:
            print("  No coverage_cmd configured. Skipping coverage.")

    print(f"\n=== {title}: report ===")
    report = build_report([LabelledRun(config.backend.model, records, config.output_dir)], config, corpus)
    _print_paths(write_report(report, config.output_dir))
    return _finish(config, incomplete)


def run_ablate(args: argparse.Namespace) -> int:
    config = _load(args)
    variants = [PromptVariant(v.strip()) for v in args.variants.split(",") if v.strip()]
    print(f"=== Ablation: {_TITLES[config.task]} ===")
    print(f"  Variants: {', '.join(v.value for v in variants)}")
    corpus = _corpus(config)
    backend = build_backend(config.backend)
    try:
        results = run_ablation(config, corpus, backend, variants)
    finally:
        close = getattr(backend, "close", None)
        if close is not None:
            close()
    for result in results:
        name, value = result.headline_metric
        print(f"  {result.variant}: {name} = {value:.3f}")
    print("\n=== Ablation: report ===")
    _print_paths(emit_all(ablation_table(results), config.output_dir / "ablation"))
    incomplete = sum(load_records(config.output_dir / v.value).incomplete for v in variants)
    return _finish(config, incomplete)


def run_report(args: argparse.Namespace) -> int:
    config = _load(args)
    run_dirs = args.run_dirs or [config.output_dir]
    print(f"=== Report: {_TITLES[config.task]} ===")
    runs = []
    labels: set[str] = set()
    for run_dir in run_dirs:
        stored = load_records(run_dir)
        if stored.task is not config.task:
            raise ConfigError(f"{run_dir} holds a {stored.task} run, the config is for {config.task}")
        label = stored.model or Path(run_dir).name
        if label in labels:
            label = f"{label} ({Path(run_dir).name})"
        labels.add(label)
        print(f"  {run_dir}: {len(stored.records)} record(s), model {stored.model}")
        runs.append(LabelledRun(label, stored.records, Path(run_dir)))
    units = load_task_corpus(config) if config.task is Task.MUTATION and config.mutation.baseline else []
    _print_paths(write_report(build_report(runs, config, units), config.output_dir))
    print("\n=== Done ===")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common_flags() -> argparse.ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, required=True, help="Run configuration (TOML or JSON)")
    common.add_argument("--backend", choices=("scripted", "http"), help="Backend kind (overrides [backend] kind)")
    common.add_argument("--model", help="Model id sent to the backend")
    common.add_argument("--workers", type=int, help="Worker threads (default: 4)")
    common.add_argument("--out", type=Path, help="Output directory")
    common.add_argument("--strict", action="store_true", help="Abort on the first backend failure")
    common.add_argument(
        "--allow-partial",
        action="store_true",
        help="Exit 0 even when some records are incomplete",
    )
    common.add_argument("--allowlist", type=Path, help="File of path:line rows to mutate (mutation only)")
    common.add_argument("--baseline-mutants", type=Path, help="Baseline mutants CSV (path,line,mutated_line)")
    common.add_argument("--ground-truth", type=Path, help="Ground-truth oracles JSON")
    common.add_argument("--coverage-map", type=Path, help="Baseline coverage CSV (path,line,covered)")
    common.add_argument("--verbose", action="store_true", help="Log debug output")
    return common


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="promptforge",
        description="Code mutation, oracle extraction and test generation with a completion model",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
    promptforge mutate --config mutate.toml                   # Mutants and the mutation report
    promptforge mutate --config mutate.toml --variant nl-only # One prompt variant
    promptforge oracle --config oracle.toml --ground-truth truth.json
    promptforge testgen --config testgen.toml --coverage-map randoop.csv
    promptforge ablate --config testgen.toml                  # All four prompt variants
    promptforge report --config mutate.toml out/a out/b       # Join two model runs
        """,
    )
    common = _common_flags()
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, task in TASK_COMMANDS.items():
        sub = commands.add_parser(name, parents=[common], help=f"Run the {task} pipeline")
        sub.add_argument("--variant", choices=[v.value for v in PromptVariant], help="Prompt variant")
        sub.set_defaults(handler=run_task)
    ablate = commands.add_parser("ablate", parents=[common], help="Run one task for several prompt variants")
    ablate.add_argument(
        "--variants",
        default=",".join(v.value for v in PromptVariant),
        help="Comma-separated variants (default: all four)",
    )
    ablate.set_defaults(handler=run_ablate)
    report = commands.add_parser("report", parents=[common], help="Rebuild reports from records.json")
    report.add_argument("run_dirs", nargs="*", type=Path, help="Run directories (default: the output directory)")
    report.set_defaults(handler=run_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except PromptforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
