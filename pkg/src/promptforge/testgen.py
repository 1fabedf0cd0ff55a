"""Unit test generation for public methods.

Each method under test is queried over a temperature sweep (by default
0.0 to 0.9 in steps of 0.1, ten queries each).  Every completion is cut
at its first balanced closing brace, injected into the adapter's test
class template and compile-checked; duplicates are dropped afterwards.
Compiling tests are written to the output directory and measured with
the adapter's coverage command.
"""

from collections.abc import Iterable
from collections.abc import Iterator
from collections.abc import Mapping
from collections.abc import Sequence
from dataclasses import dataclass
from dataclasses import replace
from pathlib import Path
from promptforge.backend import ModelRequest
from promptforge.backend import RequestKey
from promptforge.errors import BadTemplate
from promptforge.errors import ConfigError
from promptforge.errors import IOFailure
from promptforge.errors import UnbalancedBraces
from promptforge.errors import UniverseMismatch
from promptforge.lang_adapter import AdapterSpec
from promptforge.lang_adapter import compile_check
from promptforge.lang_adapter import CoverageMap
from promptforge.lang_adapter import extract_methods
from promptforge.lang_adapter import find_balanced_end
from promptforge.lang_adapter import load_coverage_map
from promptforge.lang_adapter import mask_code
from promptforge.lang_adapter import MethodInfo
from promptforge.lang_adapter import parse_method_header
from promptforge.lang_adapter import project_of
from promptforge.lang_adapter import run_coverage
from promptforge.lang_adapter import strip_line_comments
from promptforge.prompts import assemble_prompt
from promptforge.prompts import PromptTemplate
from promptforge.records import Discard
from promptforge.records import GeneratedArtifact
from promptforge.records import Instance
from promptforge.records import PromptBundle
from promptforge.records import PromptVariant
from promptforge.records import register_artifact
from promptforge.records import RunRecord
from promptforge.records import SourceUnit
from promptforge.records import Task
from typing import Any
from typing import TYPE_CHECKING

import hashlib
import logging
import math
import re
import warnings


if TYPE_CHECKING:
    from promptforge.config import TaskConfig


logger = logging.getLogger(__name__)

MAX_HELPERS = 5
TEST_BODY = "{TEST_BODY}"
CLASS_NAME = "{CLASS_NAME}"
COVERAGE_FILE = "coverage.csv"

_MODIFIERS_RE = re.compile(
    r"\b(?:public|protected|private|static|final|synchronized|abstract|native|strictfp|default)\s+"
)


@dataclass(frozen=True)
class TemperatureSchedule:
    start: float = 0.0
    end: float = 0.9
    step: float = 0.1
    queries_per_temperature: int = 10

    def __post_init__(self) -> None:
        if not 0.0 <= self.start <= self.end <= 1.0:
            raise ConfigError(f"schedule needs 0 <= start <= end <= 1, got {self.start}..{self.end}")
        if self.step <= 0:
            raise ConfigError("schedule step must be positive")
        if self.queries_per_temperature < 1:
            raise ConfigError("queries_per_temperature must be >= 1")

    @property
    def grid(self) -> list[float]:
        count = math.floor((self.end - self.start) / self.step + 1e-9)
        return [round(self.start + i * self.step, 2) for i in range(count + 1)]

    def points(self) -> Iterator[tuple[float, int]]:
        """(temperature, query index) pairs, by temperature then index."""
        for temperature in self.grid:
            for index in range(self.queries_per_temperature):
                yield temperature, index

    def __len__(self) -> int:
        return len(self.grid) * self.queries_per_temperature


def schedule_queries(schedule: TemperatureSchedule, base: ModelRequest) -> list[ModelRequest]:
    key = base.key or RequestKey(instance_id="", variant=PromptVariant.DEFAULT.value, temperature=0.0)
    return [
        replace(base, temperature=temperature, key=replace(key, temperature=temperature, query_index=index))
        for temperature, index in schedule.points()
    ]


# ---------------------------------------------------------------------------
# Candidates
# ---------------------------------------------------------------------------


def normalize_test_body(body: str) -> str:
    return " ".join(strip_line_comments(body).split())


def body_hash(body: str) -> str:
    return hashlib.sha256(normalize_test_body(body).encode("utf-8")).hexdigest()


@register_artifact("test")
@dataclass(frozen=True)
class TestCandidate:
    __test__ = False

    body: str
    temperature: float
    query_index: int
    compiles: bool = False
    normalized_hash: str = ""
    method_id: str = ""

    def __post_init__(self) -> None:
        if not self.normalized_hash:
            object.__setattr__(self, "normalized_hash", body_hash(self.body))

    @property
    def label(self) -> str:
        return f"t{self.temperature:.1f}_q{self.query_index}"

    @property
    def size(self) -> int:
        """Non-blank lines of the test method."""
        return sum(1 for line in self.body.splitlines() if line.strip())

    def to_dict(self) -> dict[str, Any]:
        return {
            "body": self.body,
            "temperature": self.temperature,
            "query_index": self.query_index,
            "compiles": self.compiles,
            "normalized_hash": self.normalized_hash,
            "method_id": self.method_id,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TestCandidate":
        return cls(
            body=data["body"],
            temperature=data["temperature"],
            query_index=data["query_index"],
            compiles=data.get("compiles", False),
            normalized_hash=data.get("normalized_hash", ""),
            method_id=data.get("method_id", ""),
        )


def _split_test(text: str) -> tuple[str | None, str]:
    """(test body or None, discard reason)."""
    text = text.lstrip()
    masked = mask_code(text)
    open_pos = masked.find("{")
    if open_pos == -1:
        return None, "unterminated test"
    end = find_balanced_end(text, open_pos)
    if end is None:
        return None, "unterminated test"
    header = " ".join(masked[:open_pos].split())
    if parse_method_header(header) is None:
        return None, "not a test method"
    return text[:end].strip(), ""


def parse_test_completion(
    text: str, temperature: float = 0.0, query_index: int = 0, method_id: str = ""
) -> TestCandidate | None:
    """The test method at the start of *text*, up to its balanced closing brace."""
    body, _ = _split_test(text)
    if body is None:
        return None
    return TestCandidate(body=body, temperature=temperature, query_index=query_index, method_id=method_id)


def inject_into_template(candidate: TestCandidate, template: str) -> str:
    """Place the test into the class template under a per-candidate class name.

    With a ``{CLASS_NAME}`` placeholder the class is named
    ``GeneratedTest_<hash>``; otherwise the first declared class gets the
    hash suffix.
    """
    count = template.count(TEST_BODY)
    if count != 1:
        raise BadTemplate(f"test class template must contain {TEST_BODY} exactly once (found {count})")
    suffix = candidate.normalized_hash[:8]
    if CLASS_NAME in template:
        unit = template.replace(CLASS_NAME, f"GeneratedTest_{suffix}")
    else:
        unit, renamed = re.subn(
            r"\bclass\s+([A-Za-z_$][\w$]*)",
            lambda m: f"class {m.group(1)}_{suffix}",
            template,
            count=1,
        )
        if not renamed:
            raise BadTemplate("test class template declares no class")
    return unit.replace(TEST_BODY, candidate.body)


def dedup(candidates: Iterable[TestCandidate]) -> list[TestCandidate]:
    seen: set[str] = set()
    survivors = []
    for candidate in candidates:
        if candidate.normalized_hash in seen:
            continue
        seen.add(candidate.normalized_hash)
        survivors.append(candidate)
    return survivors


# ---------------------------------------------------------------------------
# Coverage
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SuiteCoverage:
    """Coverage of one tool's suite, with its size when known."""

    coverage: CoverageMap
    compiling_tests: int | None = None
    test_sizes: tuple[int, ...] = ()

    @property
    def mean_size(self) -> int | None:
        if not self.test_sizes:
            return None
        return round(sum(self.test_sizes) / len(self.test_sizes))


@dataclass(frozen=True)
class ToolCoverage:
    tool: str
    compiling_tests: int | None
    test_size: int | None
    line_coverage: float


@dataclass(frozen=True)
class CoverageRow:
    tools: tuple[ToolCoverage, ...]
    combined: float
    label: str = ""


def _universe(maps: Sequence[CoverageMap]) -> frozenset[tuple[str, int]]:
    universe: frozenset[tuple[str, int]] | None = None
    for cmap in maps:
        if not cmap.lines:
            continue
        if universe is None:
            universe = cmap.instrumented
        elif cmap.instrumented != universe:
            raise UniverseMismatch(
                f"coverage maps disagree on instrumented lines ({len(universe)} vs {len(cmap.instrumented)})"
            )
    return universe or frozenset()


def coverage_report(per_tool: Mapping[str, CoverageMap | SuiteCoverage], label: str = "") -> CoverageRow:
    """CT, TS and LC per tool plus the LC of the union of covered lines.

    Empty maps (a tool without tests) cover nothing of the shared universe.
    """
    suites = {
        tool: value if isinstance(value, SuiteCoverage) else SuiteCoverage(value)
        for tool, value in per_tool.items()
    }
    universe = _universe([s.coverage for s in suites.values()])

    def share(lines: frozenset[tuple[str, int]]) -> float:
        return len(lines & universe) / len(universe) if universe else 0.0

    rows = []
    union: frozenset[tuple[str, int]] = frozenset()
    for tool, suite in suites.items():
        covered = suite.coverage.covered
        union |= covered
        rows.append(ToolCoverage(tool, suite.compiling_tests, suite.mean_size, share(covered)))
    return CoverageRow(tools=tuple(rows), combined=share(union), label=label)


# ---------------------------------------------------------------------------
# Prompt inputs
# ---------------------------------------------------------------------------


def method_signature(signature: str) -> str:
    """Signature without modifiers, e.g. ``DoubleArrayList quantiles(DoubleArrayList percentages)``."""
    return _MODIFIERS_RE.sub("", signature).strip()


def _base_type(type_name: str) -> str:
    return re.sub(r"<.*>|\[\]|\.\.\.", "", type_name).strip().rsplit(".", 1)[-1]


def select_helpers(method: MethodInfo, constructors: Mapping[str, list[MethodInfo]]) -> list[str]:
    """Zero-argument constructors of the class under test, then constructors
    of the parameter types, at most ``MAX_HELPERS`` entries."""
    helpers: list[str] = []
    own = constructors.get(method.class_name)
    if own is None:
        if method.class_name:
            helpers.append(f"{method.class_name}()")
    else:
        helpers.extend(c.short_signature for c in own if not c.params)
    for ptype in method.param_types:
        for ctor in constructors.get(_base_type(ptype), []):
            helpers.append(ctor.short_signature)
    unique = list(dict.fromkeys(helpers))
    return unique[:MAX_HELPERS]


def _stable_index(seed: str, size: int) -> int:
    return int(hashlib.sha256(seed.encode("utf-8")).hexdigest(), 16) % size


def select_example(
    pool: Sequence[Mapping[str, str]], instance: Instance, selection: str
) -> Mapping[str, str] | None:
    """Pick the one-shot example for *instance*.

    ``same-class`` prefers an example from the class under test and falls
    back to the first one; ``random`` picks, keyed on the instance id, an
    example from another project when there is one.
    """
    if not pool:
        return None
    if selection == "same-class":
        same = [e for e in pool if e.get("class_name") == instance.context.get("class_name")]
        return same[0] if same else pool[0]
    if selection == "random":
        project = instance.context.get("project")
        others = [e for e in pool if e.get("project") != project] or list(pool)
        return others[_stable_index(instance.id, len(others))]
    raise ConfigError(f"unknown example selection {selection!r} (same-class or random)")


def load_method_list(path: Path) -> frozenset[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot read method list {path}: {exc}") from exc
    return frozenset(line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#"))


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def method_dir_name(method_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", method_id).strip("_") or "method"


def method_dir(out_dir: Path, method_id: str) -> Path:
    return Path(out_dir) / method_dir_name(method_id)


def final_tests(record: RunRecord) -> list[TestCandidate]:
    """Compiling candidates of a record (already deduplicated)."""
    return [value for value in record.values() if isinstance(value, TestCandidate) and value.compiles]


def write_tests(records: Iterable[RunRecord], spec: AdapterSpec, out_dir: Path) -> dict[str, list[Path]]:
    """Write every compiling test as a unit under ``<out>/<method>/``."""
    written: dict[str, list[Path]] = {}
    for record in records:
        method_id = record.instance.context.get("method_id", record.instance.id)
        target = method_dir(out_dir, method_id)
        paths = []
        for candidate in final_tests(record):
            target.mkdir(parents=True, exist_ok=True)
            path = target / f"{candidate.label}{spec.source_suffix}"
            path.write_text(inject_into_template(candidate, spec.test_class_template), encoding="utf-8")
            paths.append(path)
        written[method_id] = paths
    return written


def measure_coverage(written: Mapping[str, list[Path]], spec: AdapterSpec, out_dir: Path) -> None:
    """Run the coverage command per method; store ``coverage.csv`` next to the tests."""
    for method_id, tests in written.items():
        if not tests:
            continue
        cmap = run_coverage(tests, spec)
        target = method_dir(out_dir, method_id) / COVERAGE_FILE
        rows = [f"{path},{line},{int(hit)}" for (path, line), hit in sorted(cmap.lines.items())]
        target.write_text("path,line,covered\n" + "".join(f"{row}\n" for row in rows), encoding="utf-8")


def stored_coverage(out_dir: Path, method_id: str) -> CoverageMap:
    path = method_dir(out_dir, method_id) / COVERAGE_FILE
    return load_coverage_map(path) if path.exists() else CoverageMap()


@dataclass(frozen=True)
class MethodCoverage:
    """Everything needed for one per-method row of the coverage table."""

    method_id: str
    path: str
    generated: SuiteCoverage


def collect_method_coverage(records: Iterable[RunRecord], out_dir: Path) -> list[MethodCoverage]:
    """Per-method suites from stored records and ``coverage.csv`` files.

    Coverage is restricted to the source file declaring the method.
    """
    rows = []
    for record in records:
        method_id = record.instance.context.get("method_id")
        if method_id is None:
            continue
        path = record.instance.path
        tests = final_tests(record)
        generated = SuiteCoverage(
            coverage=stored_coverage(out_dir, method_id).restricted(path),
            compiling_tests=len(tests),
            test_sizes=tuple(t.size for t in tests),
        )
        rows.append(MethodCoverage(method_id=method_id, path=path, generated=generated))
    return rows


# ---------------------------------------------------------------------------
# Pipeline tool
# ---------------------------------------------------------------------------


def testgen_instance(unit: SourceUnit, method: MethodInfo, helpers: list[str]) -> Instance:
    return Instance(
        id=f"{unit.path}::{method.method_id}",
        task=Task.TESTGEN,
        payload=method.code or method.body,
        context={
            "code": method.code or method.body,
            "signature": method.signature,
            "method_signature": method_signature(method.signature),
            "short_signature": method.short_signature,
            "helpers": "\n".join(f"  {helper}" for helper in helpers),
            "method_id": method.method_id,
            "class_name": method.class_name,
            "path": unit.path,
            "project": project_of(unit.path),
        },
        path=unit.path,
        offset=method.byte_range[0],
    )


class TestgenTool:
    __test__ = False
    task = Task.TESTGEN

    def __init__(self, config: "TaskConfig", template: PromptTemplate) -> None:
        if config.adapter is None:
            raise ConfigError("the testgen task needs an [adapter] compile_cmd")
        self.config = config
        self.template = template
        self.adapter: AdapterSpec = config.adapter
        self.schedule = config.testgen.schedule
        self.selection = config.testgen.example_selection
        self.methods = load_method_list(config.testgen.methods) if config.testgen.methods else None

    def extract(self, units: Iterable[SourceUnit]) -> tuple[list[Instance], list[tuple[SourceUnit, str]]]:
        found: list[tuple[SourceUnit, MethodInfo]] = []
        failures = []
        for unit in units:
            try:
                methods = extract_methods(unit, self.adapter)
            except UnbalancedBraces as exc:
                warnings.warn(f"{exc} — keeping {len(exc.methods)} method(s) found before it.", stacklevel=2)
                methods = exc.methods
                failures.append((unit, str(exc)))
            found.extend((unit, m) for m in methods)

        constructors: dict[str, list[MethodInfo]] = {}
        for _, method in found:
            if method.is_constructor:
                constructors.setdefault(method.class_name, []).append(method)

        instances = []
        for unit, method in found:
            if not method.is_public or method.is_constructor:
                continue
            if self.methods is not None and method.method_id not in self.methods:
                continue
            instances.append(testgen_instance(unit, method, select_helpers(method, constructors)))
        return instances, failures

    def prompts(self, instance: Instance, variant: PromptVariant) -> list[PromptBundle]:
        examples: list[Mapping[str, str]] = []
        if variant is not PromptVariant.NL_ONLY:
            if variant is PromptVariant.BAD_EX:
                chosen = select_example(self.template.bank_for(variant), instance, "random")
            else:
                chosen = select_example(self.template.examples, instance, self.selection)
            examples = [chosen] if chosen is not None else []
        base = assemble_prompt(
            self.template,
            instance,
            variant,
            budget=self.config.context_budget,
            examples=examples,
        )
        return [replace(base, temperature=t, query_index=q) for t, q in self.schedule.points()]

    def postprocess(
        self, instance: Instance, bundle: PromptBundle, raw: str
    ) -> tuple[list[TestCandidate], list[Discard]]:
        body, reason = _split_test(raw)
        if body is None:
            return [], [Discard(raw, reason)]
        candidate = TestCandidate(
            body=body,
            temperature=bundle.temperature,
            query_index=bundle.query_index,
            method_id=instance.context.get("method_id", ""),
        )
        verdict = compile_check(inject_into_template(candidate, self.adapter.test_class_template), self.adapter)
        if not verdict.ok:
            logger.debug("%s %s does not compile: %s", instance.id, candidate.label, verdict.diagnostics)
        return [replace(candidate, compiles=verdict.ok)], []

    def complete_record(self, record: RunRecord) -> None:
        """Drop duplicate candidates; the first in schedule order survives."""
        kept: list[GeneratedArtifact] = []
        first_by_hash: dict[str, str] = {}
        for artifact in record.artifacts:
            candidate = artifact.value
            first = first_by_hash.get(candidate.normalized_hash)
            if first is not None:
                record.discards.append(Discard(candidate.body, f"duplicate of {first}"))
                continue
            first_by_hash[candidate.normalized_hash] = candidate.label
            kept.append(artifact)
        record.artifacts = kept
