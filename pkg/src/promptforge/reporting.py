"""Evaluation tables and prompt-variant ablations.

Every table is built from stored ``RunRecord`` lists plus the evaluation
inputs named in the config (baseline mutants, ground truth, baseline
coverage), so ``promptforge report`` regenerates exactly what a run wrote.
"""

from collections.abc import Iterable
from collections.abc import Mapping
from collections.abc import Sequence
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from pathlib import Path
from promptforge.backend import ModelBackend
from promptforge.config import TaskConfig
from promptforge.errors import ConfigError
from promptforge.errors import IOFailure
from promptforge.lang_adapter import CoverageMap
from promptforge.lang_adapter import load_coverage_map
from promptforge.mutation import classify_baseline
from promptforge.mutation import load_baseline
from promptforge.mutation import Mutant
from promptforge.mutation import MutantClass
from promptforge.mutation import MutationSummary
from promptforge.mutation import summarize_mutants
from promptforge.oracles import find_near_misses
from promptforge.oracles import format_oracle
from promptforge.oracles import load_ground_truth
from promptforge.oracles import load_predictions
from promptforge.oracles import NearMiss
from promptforge.oracles import OracleScore
from promptforge.oracles import OracleSpec
from promptforge.oracles import score_oracles
from promptforge.pipeline import run_pipeline
from promptforge.pipeline import save_records
from promptforge.records import PromptVariant
from promptforge.records import RunRecord
from promptforge.records import SourceUnit
from promptforge.records import Task
from promptforge.testgen import collect_method_coverage
from promptforge.testgen import coverage_report
from promptforge.testgen import CoverageRow
from promptforge.testgen import measure_coverage
from promptforge.testgen import MethodCoverage
from promptforge.testgen import SuiteCoverage
from promptforge.testgen import write_tests
from typing import Any

import csv
import io
import json
import logging


logger = logging.getLogger(__name__)

FORMATS = ("json", "csv", "markdown")
SUFFIXES = {"json": ".json", "csv": ".csv", "markdown": ".md"}

_CLASS_LABELS = {
    MutantClass.DELETE_STATEMENT: "Delete statement",
    MutantClass.REPLACE_OPERATOR: "Replace operator",
    MutantClass.REPLACE_VALUE: "Replace value",
    MutantClass.OTHER: "Other",
}


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Column:
    """A table column; ``kind`` drives markdown rendering only.

    Kinds: ``text``, ``int``, ``percent`` (a fraction shown as ``12.3%``),
    ``ratio`` (two decimals) and ``float`` (two decimals).
    """

    name: str
    kind: str = "text"


@dataclass(frozen=True)
class Table:
    title: str
    columns: tuple[Column, ...]
    rows: tuple[tuple[Any, ...], ...] = ()

    def __post_init__(self) -> None:
        for row in self.rows:
            if len(row) != len(self.columns):
                raise ValueError(f"{self.title}: row {row!r} does not match {len(self.columns)} columns")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def render(self, fmt: str) -> str:
        if fmt == "json":
            return self.to_json()
        if fmt == "csv":
            return self.to_csv()
        if fmt == "markdown":
            return self.to_markdown()
        raise ConfigError(f"unknown report format {fmt!r} ({', '.join(FORMATS)})")

    def to_json(self) -> str:
        data = {
            "title": self.title,
            "columns": self.names,
            "rows": [dict(zip(self.names, (_raw(v) for v in row), strict=True)) for row in self.rows],
        }
        return json.dumps(data, indent=2, ensure_ascii=False) + "\n"

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(self.names)
        for row in self.rows:
            writer.writerow("" if v is None else _raw(v) for v in row)
        return buffer.getvalue()

    def to_markdown(self) -> str:
        lines = [f"## {self.title}", ""]
        lines.append("| " + " | ".join(self.names) + " |")
        lines.append("|" + "|".join("---" if c.kind == "text" else "---:" for c in self.columns) + "|")
        for row in self.rows:
            cells = (_cell(value, column.kind) for value, column in zip(row, self.columns, strict=True))
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def _raw(value: Any) -> Any:
    if isinstance(value, float):
        return round(value, 6)
    return value


def _cell(value: Any, kind: str) -> str:
    if value is None:
        return "-"
    if kind == "percent":
        return f"{value * 100:.1f}%"
    if kind in ("ratio", "float"):
        return f"{value:.2f}"
    return _escape(str(value))


def _escape(text: str) -> str:
    return text.replace("|", "\\|")


def emit_report(table: Table, path: Path, fmt: str) -> Path:
    """Write *table* in one format; the suffix is added when *path* has none."""
    path = Path(path)
    if not path.suffix:
        path = path.with_suffix(SUFFIXES[fmt])
    text = table.render(fmt)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write report {path}: {exc}") from exc
    return path


def emit_all(table: Table, stem: Path, formats: Iterable[str] = FORMATS) -> list[Path]:
    return [emit_report(table, stem, fmt) for fmt in formats]


def write_text(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return path


# ---------------------------------------------------------------------------
# Artifact access
# ---------------------------------------------------------------------------


def mutants_of(records: Iterable[RunRecord]) -> list[Mutant]:
    return [v for r in records for v in r.values() if isinstance(v, Mutant)]


def oracles_of(records: Iterable[RunRecord]) -> list[OracleSpec]:
    return [v for r in records for v in r.values() if isinstance(v, OracleSpec)]


@dataclass(frozen=True)
class LabelledRun:
    """One run's records under the label its report rows carry."""

    label: str
    records: list[RunRecord]
    run_dir: Path | None = None


# ---------------------------------------------------------------------------
# Mutation
# ---------------------------------------------------------------------------


def mutation_table(summaries: Sequence[MutationSummary]) -> Table:
    columns = (
        Column("Tool"),
        Column("Mutants", "int"),
        Column("Compilable", "percent"),
        Column("Overlap", "percent"),
        *(Column(_CLASS_LABELS[kind], "percent") for kind in MutantClass),
        Column("Tokens changed", "float"),
    )
    rows = tuple(
        (
            s.tool,
            s.total,
            s.compilable,
            s.overlap,
            *(s.distribution[kind] for kind in MutantClass),
            s.mean_tokens_changed,
        )
        for s in summaries
    )
    return Table("Generated mutants", columns, rows)


def mutation_summaries(
    runs: Sequence[LabelledRun], config: TaskConfig, units: Sequence[SourceUnit]
) -> list[MutationSummary]:
    baseline = load_baseline(config.mutation.baseline) if config.mutation.baseline else None
    summaries = [summarize_mutants(run.label, mutants_of(run.records), baseline) for run in runs]
    if baseline is not None:
        summaries.append(summarize_mutants("baseline", classify_baseline(baseline, units), baseline))
    return summaries


def mutant_listing(mutants: Iterable[Mutant]) -> str:
    final = sorted((m for m in mutants if m.compiles), key=lambda m: (m.path, m.line, m.mutated_line))
    lines = ["# Mutants", "", "| Location | Kind | Original | Mutant |", "|---|---|---|---|"]
    for m in final:
        lines.append(
            f"| {m.path}:{m.line} | {m.kind.value} | `{_escape(m.original_line)}` | `{_escape(m.mutated_line)}` |"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def oracle_table(scores: Mapping[str, OracleScore]) -> Table:
    """Per-project precision, recall and F1 for each tool, then Total."""
    columns = [Column("Project")]
    for label in scores:
        columns.extend(
            [Column(f"{label} Pr", "ratio"), Column(f"{label} Re", "ratio"), Column(f"{label} F1", "ratio")]
        )
    projects = sorted({p for score in scores.values() for p in score.per_project})
    rows = []
    for project in projects:
        row: list[Any] = [project]
        for score in scores.values():
            entry = score.per_project.get(project)
            row.extend([entry.precision, entry.recall, entry.f1] if entry else [None, None, None])
        rows.append(tuple(row))
    if scores:
        total: list[Any] = ["Total"]
        for score in scores.values():
            total.extend([score.precision, score.recall, score.f1])
        rows.append(tuple(total))
    return Table("Metamorphic oracles", tuple(columns), tuple(rows))


def oracle_scores(runs: Sequence[LabelledRun], config: TaskConfig) -> tuple[dict[str, OracleScore], list[NearMiss]]:
    if config.oracle.ground_truth is None:
        logger.warning("no [oracle] ground_truth configured; oracles are listed but not scored")
        return {}, []
    truths = load_ground_truth(config.oracle.ground_truth)
    scores = {}
    near_misses = []
    for run in runs:
        preds = oracles_of(run.records)
        scores[run.label] = score_oracles(preds, truths)
        near_misses.extend(find_near_misses(preds, truths))
    if config.oracle.baseline is not None:
        scores["baseline"] = score_oracles(load_predictions(config.oracle.baseline), truths)
    return scores, near_misses


def oracle_listing(records: Iterable[RunRecord]) -> str:
    lines = ["# Oracles", "", "| Method | Oracle |", "|---|---|"]
    for spec in oracles_of(records):
        lines.append(f"| {_escape(spec.method_id)} | `{_escape(format_oracle(spec))}` |")
    return "\n".join(lines) + "\n"


def near_miss_listing(misses: Iterable[NearMiss]) -> str:
    lines = ["# Near misses", "", "| Method | Predicted | Ground truth |", "|---|---|---|"]
    for miss in misses:
        truth = OracleSpec(miss.truth.condition, miss.truth.lhs, miss.truth.rhs, miss.truth.method_id)
        lines.append(
            f"| {_escape(miss.prediction.method_id)} | `{_escape(format_oracle(miss.prediction))}` "
            f"| `{_escape(format_oracle(truth))}` |"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Test generation
# ---------------------------------------------------------------------------


def coverage_table(rows: Sequence[CoverageRow], tools: Sequence[str]) -> Table:
    columns = [Column("Method")]
    for tool in tools:
        columns.extend([Column(f"{tool} CT", "int"), Column(f"{tool} TS", "int"), Column(f"{tool} LC", "percent")])
    columns.append(Column("Combined LC", "percent"))
    body = []
    for row in rows:
        cells: list[Any] = [row.label]
        for entry in row.tools:
            cells.extend([entry.compiling_tests, entry.test_size, entry.line_coverage])
        cells.append(row.combined)
        body.append(tuple(cells))
    return Table("Generated tests", tuple(columns), tuple(body))


def _merge(maps: Iterable[CoverageMap]) -> CoverageMap:
    merged = CoverageMap()
    for cmap in maps:
        merged = merged.merged(cmap)
    return merged


def _pad_empty(suites: dict[str, SuiteCoverage]) -> dict[str, SuiteCoverage]:
    """Give suites without coverage the method's universe, all uncovered.

    Keeps the merged Total universes identical across tools.
    """
    reference = next((s.coverage for s in suites.values() if s.coverage.lines), None)
    if reference is None:
        return suites
    blank = CoverageMap(dict.fromkeys(reference.lines, False))
    return {
        tool: suite if suite.coverage.lines else replace(suite, coverage=blank)
        for tool, suite in suites.items()
    }


def coverage_rows(runs: Sequence[LabelledRun], config: TaskConfig) -> tuple[list[CoverageRow], list[str]]:
    """One row per method under test plus a Total row over all of them.

    Runs are joined on the method id; the baseline map, when configured,
    is restricted to each method's source file.
    """
    baseline = load_coverage_map(config.testgen.coverage_map) if config.testgen.coverage_map else None
    per_run: list[dict[str, MethodCoverage]] = []
    for run in runs:
        out_dir = run.run_dir or config.output_dir
        per_run.append({mc.method_id: mc for mc in collect_method_coverage(run.records, out_dir)})

    tools = [run.label for run in runs] + (["baseline"] if baseline is not None else [])
    methods = sorted({m for entries in per_run for m in entries})
    rows = []
    totals: dict[str, list[SuiteCoverage]] = {tool: [] for tool in tools}
    for method_id in methods:
        suites: dict[str, SuiteCoverage] = {}
        path = ""
        for run, entries in zip(runs, per_run, strict=True):
            entry = entries.get(method_id)
            suites[run.label] = entry.generated if entry else SuiteCoverage(CoverageMap(), 0)
            if entry:
                path = entry.path
        if baseline is not None:
            suites["baseline"] = SuiteCoverage(baseline.restricted(path))
        suites = _pad_empty(suites)
        for tool, suite in suites.items():
            totals[tool].append(suite)
        rows.append(coverage_report(suites, label=method_id))

    if methods:
        merged = {}
        for tool, suites in totals.items():
            counts = [s.compiling_tests for s in suites if s.compiling_tests is not None]
            merged[tool] = SuiteCoverage(
                coverage=_merge(s.coverage for s in suites),
                compiling_tests=sum(counts) if counts else None,
                test_sizes=tuple(size for s in suites for size in s.test_sizes),
            )
        rows.append(coverage_report(merged, label="Total"))
    return rows, tools


# ---------------------------------------------------------------------------
# Task reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskReport:
    table: Table
    listings: Mapping[str, str] = field(default_factory=dict)


def build_report(runs: Sequence[LabelledRun], config: TaskConfig, units: Sequence[SourceUnit] = ()) -> TaskReport:
    if config.task is Task.MUTATION:
        mutants = [m for run in runs for m in mutants_of(run.records)]
        return TaskReport(
            mutation_table(mutation_summaries(runs, config, units)),
            {"mutants.md": mutant_listing(mutants)},
        )
    if config.task is Task.ORACLE:
        scores, misses = oracle_scores(runs, config)
        listings = {"oracles.md": oracle_listing(r for run in runs for r in run.records)}
        if scores:
            listings["near_misses.md"] = near_miss_listing(misses)
        return TaskReport(oracle_table(scores), listings)
    rows, tools = coverage_rows(runs, config)
    return TaskReport(coverage_table(rows, tools))


def write_report(report: TaskReport, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    paths = emit_all(report.table, out_dir / "report")
    for name, text in report.listings.items():
        paths.append(write_text(out_dir / name, text))
    return paths


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

HEADLINE_METRICS = {
    Task.MUTATION: "compilable",
    Task.ORACLE: "f1",
    Task.TESTGEN: "line_coverage",
}

_COUNT_KINDS = {
    "overlap": "percent",
    "precision": "ratio",
    "recall": "ratio",
    "tokens_changed": "float",
}


@dataclass(frozen=True)
class AblationResult:
    task: Task
    variant: PromptVariant
    headline_metric: tuple[str, float]
    raw_counts: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        expected = HEADLINE_METRICS[self.task]
        if self.headline_metric[0] != expected:
            raise ValueError(f"{self.task} ablations report {expected}, not {self.headline_metric[0]}")


def evaluate_variant(
    config: TaskConfig, variant: PromptVariant, records: list[RunRecord], units: Sequence[SourceUnit], out_dir: Path
) -> AblationResult:
    run = LabelledRun(variant.value, records, out_dir)
    if config.task is Task.MUTATION:
        summary = mutation_summaries([run], config, units)[0]
        counts = {"mutants": summary.total, "tokens_changed": summary.mean_tokens_changed}
        if summary.overlap is not None:
            counts["overlap"] = summary.overlap
        return AblationResult(config.task, variant, ("compilable", summary.compilable), counts)
    if config.task is Task.ORACLE:
        if config.oracle.ground_truth is None:
            raise ConfigError("oracle ablations need [oracle] ground_truth (or --ground-truth)")
        score = oracle_scores([run], config)[0][variant.value]
        counts = {
            "predicted": score.predicted,
            "correct": score.correct,
            "expected": score.expected,
            "precision": score.precision,
            "recall": score.recall,
        }
        return AblationResult(config.task, variant, ("f1", score.f1), counts)
    # Variants are compared with each other; the baseline map stays out.
    without_baseline = replace(config, testgen=replace(config.testgen, coverage_map=None))
    rows, _ = coverage_rows([run], without_baseline)
    if not rows:
        return AblationResult(config.task, variant, ("line_coverage", 0.0), {"compiling_tests": 0})
    total = rows[-1].tools[0]
    counts = {"compiling_tests": total.compiling_tests or 0}
    return AblationResult(config.task, variant, ("line_coverage", total.line_coverage), counts)


def run_ablation(
    task_config: TaskConfig,
    corpus: list[SourceUnit],
    backend: ModelBackend | Mapping[PromptVariant, ModelBackend],
    variants: Sequence[PromptVariant],
    *,
    out_dir: Path | None = None,
) -> list[AblationResult]:
    """Run the pipeline once per variant over the same corpus.

    *backend* may map variants to their own backends (scripted banks per
    variant).  Records of each variant are kept under ``<out>/<variant>/``.
    """
    if not variants:
        raise ConfigError("an ablation needs at least one prompt variant")
    out_dir = Path(out_dir or task_config.output_dir)
    results = []
    for variant in variants:
        if isinstance(backend, Mapping):
            try:
                variant_backend = backend[variant]
            except KeyError as exc:
                raise ConfigError(f"no backend configured for variant {variant}") from exc
        else:
            variant_backend = backend
        config = task_config.with_variant(variant)
        variant_dir = out_dir / variant.value
        logger.info("ablation: running %s variant", variant)
        records = run_pipeline(config, corpus, variant_backend)
        save_records(records, variant_dir, task=config.task, model=config.backend.model, variant=variant)
        if config.task is Task.TESTGEN and config.adapter is not None:
            written = write_tests(records, config.adapter, variant_dir)
            if config.adapter.coverage_cmd:
                measure_coverage(written, config.adapter, variant_dir)
        results.append(evaluate_variant(config, variant, records, corpus, variant_dir))
    return results


def ablation_table(results: Sequence[AblationResult]) -> Table:
    """Headline metric and raw counts per variant; count columns follow first use."""
    count_names: list[str] = []
    for result in results:
        for name in result.raw_counts:
            if name not in count_names:
                count_names.append(name)
    metric = results[0].headline_metric[0] if results else "metric"
    kind = "ratio" if metric == "f1" else "percent"
    columns = (
        Column("Task"),
        Column("Variant"),
        Column(metric, kind),
        *(Column(name, _COUNT_KINDS.get(name, "int")) for name in count_names),
    )
    rows = tuple(
        (r.task.value, r.variant.value, r.headline_metric[1], *(r.raw_counts.get(name) for name in count_names))
        for r in results
    )
    return Table("Prompt variants", columns, rows)
