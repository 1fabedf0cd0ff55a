"""Metamorphic oracle extraction from method documentation.

The model reads a method signature and its doc comment and answers with
an equivalence ``[if (<cond>) {{ ]<lhs> <-> <rhs>[ }}];``.  Predictions
are compile-checked (when the adapter can wrap expressions), class names
are expanded to qualified names, and the result is scored against a
ground-truth file.
"""

from collections.abc import Iterable
from collections.abc import Mapping
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from pathlib import Path
from promptforge.errors import ConfigError
from promptforge.errors import IOFailure
from promptforge.errors import UnbalancedBraces
from promptforge.lang_adapter import AdapterSpec
from promptforge.lang_adapter import compile_check
from promptforge.lang_adapter import extract_methods
from promptforge.lang_adapter import MethodInfo
from promptforge.lang_adapter import project_of
from promptforge.lang_adapter import scan_segments
from promptforge.prompts import assemble_prompt
from promptforge.prompts import PromptTemplate
from promptforge.records import Discard
from promptforge.records import Instance
from promptforge.records import PromptBundle
from promptforge.records import PromptVariant
from promptforge.records import register_artifact
from promptforge.records import RunRecord
from promptforge.records import SourceUnit
from promptforge.records import Task
from typing import Any
from typing import TYPE_CHECKING

import json
import logging
import re
import warnings


if TYPE_CHECKING:
    from promptforge.config import TaskConfig


logger = logging.getLogger(__name__)

EQUIVALENCE_HEADER = "### Equivalence"
DEFAULT_PROJECT = "other"


def _squash(text: str) -> str:
    return "".join(text.split())


def _check_sides(lhs: str, rhs: str, condition: str | None) -> None:
    if not lhs.strip() or not rhs.strip():
        raise ValueError("both sides of an equivalence must be non-empty")
    if _squash(lhs) == _squash(rhs):
        raise ValueError(f"both sides of the equivalence are {lhs!r}")
    if condition is not None and not condition.strip():
        raise ValueError("a condition, when present, must be non-empty")


@register_artifact("oracle")
@dataclass(frozen=True)
class OracleSpec:
    condition: str | None
    lhs: str
    rhs: str
    method_id: str = ""
    project: str = ""

    def __post_init__(self) -> None:
        _check_sides(self.lhs, self.rhs, self.condition)

    def to_dict(self) -> dict[str, Any]:
        return {
            "condition": self.condition,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "method_id": self.method_id,
            "project": self.project,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "OracleSpec":
        return cls(
            condition=data.get("condition"),
            lhs=data["lhs"],
            rhs=data["rhs"],
            method_id=data.get("method_id", ""),
            project=data.get("project", ""),
        )


@dataclass(frozen=True)
class GroundTruthOracle:
    method_id: str
    condition: str | None
    lhs: str
    rhs: str
    project: str

    def __post_init__(self) -> None:
        _check_sides(self.lhs, self.rhs, self.condition)


# ---------------------------------------------------------------------------
# Parsing and formatting
# ---------------------------------------------------------------------------

_CONDITIONAL_RE = re.compile(r"if\s*\((?P<cond>.*)\)\s*\{\{?(?P<body>.*?)\}?\}")
_WRAPPED_RE = re.compile(r"\{\{(?P<body>.*)\}\}")


def _parse_oracle_line(line: str, method_id: str) -> OracleSpec | None:
    text = line.strip().rstrip(";").strip()
    condition = None
    match = _CONDITIONAL_RE.fullmatch(text)
    if match is not None:
        condition = match["cond"].strip()
        text = match["body"]
    else:
        wrapped = _WRAPPED_RE.fullmatch(text)
        if wrapped is not None:
            text = wrapped["body"]
    lhs, _, rhs = text.partition("<->")
    lhs = lhs.strip().rstrip(";").strip()
    rhs = rhs.strip().rstrip(";").strip()
    try:
        return OracleSpec(condition=condition, lhs=lhs, rhs=rhs, method_id=method_id)
    except ValueError:
        return None


def parse_oracle_completion(text: str, method_id: str = "") -> OracleSpec | None:
    """Return the oracle on the first ``<->`` line, or None.

    When the completion carries an ``### Equivalence`` header only the text
    after it is considered, so the free-text analysis is never parsed.
    """
    if EQUIVALENCE_HEADER in text:
        text = text.split(EQUIVALENCE_HEADER, 1)[1]
    for line in text.splitlines():
        if "<->" in line:
            return _parse_oracle_line(line, method_id)
    return None


def format_oracle(spec: OracleSpec) -> str:
    if spec.condition is not None:
        return f"if ({spec.condition}) {{{{ {spec.lhs} <-> {spec.rhs} }}}};"
    return f"{spec.lhs} <-> {spec.rhs};"


# ---------------------------------------------------------------------------
# Name expansion
# ---------------------------------------------------------------------------


def _expand_expression(expr: str, pattern: re.Pattern, symbols: Mapping[str, str]) -> str:
    parts = []
    for kind, start, end in scan_segments(expr):
        chunk = expr[start:end]
        if kind == "code":
            chunk = pattern.sub(lambda m: symbols[m.group(1)], chunk)
        parts.append(chunk)
    return "".join(parts)


def expand_names(spec: OracleSpec, symbols: Mapping[str, str]) -> OracleSpec:
    """Qualify simple class names found in *symbols*.

    Only whole identifiers that are not already qualified (no ``.`` right
    before them) are replaced; longer keys win over their prefixes.
    """
    if not symbols:
        return spec
    keys = sorted(symbols, key=lambda k: (-len(k), k))
    pattern = re.compile(r"(?<![\w$.])(" + "|".join(re.escape(k) for k in keys) + r")(?![\w$])")
    condition = spec.condition
    if condition is not None:
        condition = _expand_expression(condition, pattern, symbols)
    return replace(
        spec,
        condition=condition,
        lhs=_expand_expression(spec.lhs, pattern, symbols),
        rhs=_expand_expression(spec.rhs, pattern, symbols),
    )


# ---------------------------------------------------------------------------
# Matching and scoring
# ---------------------------------------------------------------------------


def _outer_parens_redundant(text: str) -> bool:
    depth = 0
    for index, ch in enumerate(text):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth == 0 and index != len(text) - 1:
                return False
    return True


def normalize_expression(expr: str | None) -> str | None:
    """Drop whitespace, a trailing ``;`` and redundant outer parentheses."""
    if expr is None:
        return None
    text = _squash(expr).rstrip(";")
    while text.startswith("(") and text.endswith(")") and _outer_parens_redundant(text):
        text = text[1:-1]
    return text


def _pair(lhs: str, rhs: str) -> frozenset[str]:
    return frozenset({normalize_expression(lhs), normalize_expression(rhs)})


def pair_matches(pred: OracleSpec, truth: GroundTruthOracle) -> bool:
    return _pair(pred.lhs, pred.rhs) == _pair(truth.lhs, truth.rhs)


def match_oracle(pred: OracleSpec, truth: GroundTruthOracle) -> bool:
    return pair_matches(pred, truth) and normalize_expression(pred.condition) == normalize_expression(
        truth.condition
    )


def f1_score(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class ProjectScore:
    predicted: int
    correct: int
    expected: int

    @property
    def precision(self) -> float:
        return self.correct / self.predicted if self.predicted else 0.0

    @property
    def recall(self) -> float:
        return self.correct / self.expected if self.expected else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)


@dataclass(frozen=True)
class OracleScore:
    precision: float
    recall: float
    f1: float
    per_project: Mapping[str, ProjectScore] = field(default_factory=dict)
    predicted: int = 0
    correct: int = 0
    expected: int = 0


def _assign(preds: list[OracleSpec], truths: list[GroundTruthOracle]) -> dict[int, int]:
    """Greedy one-to-one matching: prediction index to truth index."""
    taken: set[int] = set()
    assignment = {}
    for p_index, pred in enumerate(preds):
        for t_index, truth in enumerate(truths):
            if t_index in taken or truth.method_id != pred.method_id:
                continue
            if match_oracle(pred, truth):
                taken.add(t_index)
                assignment[p_index] = t_index
                break
    return assignment


def score_oracles(preds: Iterable[OracleSpec], truths: Iterable[GroundTruthOracle]) -> OracleScore:
    """Precision, recall and F1, per project and micro-averaged in total.

    A prediction belongs to the project of the ground truth sharing its
    method id, else to its own ``project``, else to ``other``.
    """
    preds = list(preds)
    truths = list(truths)
    assignment = _assign(preds, truths)
    project_by_method = {}
    for truth in truths:
        project_by_method.setdefault(truth.method_id, truth.project)

    predicted: dict[str, int] = {}
    correct: dict[str, int] = {}
    expected: dict[str, int] = {}
    for index, pred in enumerate(preds):
        project = project_by_method.get(pred.method_id) or pred.project or DEFAULT_PROJECT
        predicted[project] = predicted.get(project, 0) + 1
        if index in assignment:
            correct[project] = correct.get(project, 0) + 1
    for truth in truths:
        expected[truth.project] = expected.get(truth.project, 0) + 1

    per_project = {
        project: ProjectScore(predicted.get(project, 0), correct.get(project, 0), expected.get(project, 0))
        for project in sorted(set(predicted) | set(expected))
    }
    total = ProjectScore(len(preds), len(assignment), len(truths))
    return OracleScore(
        precision=total.precision,
        recall=total.recall,
        f1=total.f1,
        per_project=per_project,
        predicted=total.predicted,
        correct=total.correct,
        expected=total.expected,
    )


@dataclass(frozen=True)
class NearMiss:
    prediction: OracleSpec
    truth: GroundTruthOracle


def find_near_misses(preds: Iterable[OracleSpec], truths: Iterable[GroundTruthOracle]) -> list[NearMiss]:
    """Unmatched predictions whose expression pair matches a truth of the same method."""
    preds = list(preds)
    truths = list(truths)
    assignment = _assign(preds, truths)
    misses = []
    for index, pred in enumerate(preds):
        if index in assignment:
            continue
        for truth in truths:
            if truth.method_id == pred.method_id and pair_matches(pred, truth):
                misses.append(NearMiss(pred, truth))
                break
    return misses


# ---------------------------------------------------------------------------
# Candidate sentences
# ---------------------------------------------------------------------------

_KEYWORD_RE = re.compile(r"\b(?:equivalent|same as|identical to|equal to)\b", re.IGNORECASE)
_CODE_LIKE_RE = re.compile(r"[\w$]+\s*\([^()]*\)|[\w$]+\.[\w$]+|[\w$]*#[\w$]+|\{@code")
_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?])\s+(?=[A-Z@{])")


def find_oracle_candidates(doc_comment: str | None) -> list[str]:
    """Sentences that state an equivalence with something code-like."""
    if not doc_comment:
        return []
    text = " ".join(doc_comment.split())
    return [
        sentence
        for sentence in _SENTENCE_SPLIT_RE.split(text)
        if _KEYWORD_RE.search(sentence) and _CODE_LIKE_RE.search(sentence)
    ]


# ---------------------------------------------------------------------------
# Input files
# ---------------------------------------------------------------------------


def _read_json(path: Path, what: str) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IOFailure(f"cannot read {what} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path} is not valid JSON: {exc}") from exc


def load_ground_truth(path: Path) -> list[GroundTruthOracle]:
    rows = _read_json(path, "ground truth")
    if not isinstance(rows, list):
        raise ConfigError(f"ground truth {path} must be a JSON array")
    truths = []
    seen = set()
    for row in rows:
        try:
            truth = GroundTruthOracle(
                method_id=row["method_id"],
                condition=row.get("condition"),
                lhs=row["lhs"],
                rhs=row["rhs"],
                project=row.get("project") or DEFAULT_PROJECT,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad ground-truth row {row!r} in {path}: {exc}") from exc
        key = (truth.method_id, _pair(truth.lhs, truth.rhs), normalize_expression(truth.condition))
        if key in seen:
            raise ConfigError(f"duplicate ground-truth oracle for {truth.method_id} in {path}")
        seen.add(key)
        truths.append(truth)
    return truths


def load_predictions(path: Path) -> list[OracleSpec]:
    """Oracles produced by another tool, in the ground-truth file format."""
    rows = _read_json(path, "baseline oracles")
    if not isinstance(rows, list):
        raise ConfigError(f"baseline oracles {path} must be a JSON array")
    try:
        return [OracleSpec.from_dict(row) for row in rows]
    except (KeyError, TypeError, AttributeError, ValueError) as exc:
        raise ConfigError(f"bad baseline oracle in {path}: {exc}") from exc


def load_symbols(path: Path) -> dict[str, str]:
    data = _read_json(path, "symbol file")
    if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
        raise ConfigError(f"symbol file {path} must map simple names to qualified names")
    return data


def load_candidates(path: Path) -> frozenset[str]:
    """Method ids, one per line, that bypass the sentence heuristic."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot read candidate list {path}: {exc}") from exc
    return frozenset(
        line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")
    )


# ---------------------------------------------------------------------------
# Pipeline tool
# ---------------------------------------------------------------------------


def method_instance(unit: SourceUnit, method: MethodInfo, task: Task) -> Instance:
    return Instance(
        id=f"{unit.path}::{method.method_id}",
        task=task,
        payload=method.code or method.body,
        context={
            "signature": method.signature,
            "comment": method.doc_comment or "",
            "method_id": method.method_id,
            "class_name": method.class_name,
            "path": unit.path,
            "project": project_of(unit.path),
        },
        path=unit.path,
        offset=method.byte_range[0],
    )


class OracleTool:
    task = Task.ORACLE

    def __init__(self, config: "TaskConfig", template: PromptTemplate) -> None:
        self.config = config
        self.template = template
        self.adapter: AdapterSpec | None = config.adapter
        oracle = config.oracle
        self.symbols = load_symbols(oracle.symbols) if oracle.symbols else {}
        self.candidates = load_candidates(oracle.candidates) if oracle.candidates else None

    def _is_candidate(self, method: MethodInfo) -> bool:
        if not method.doc_comment:
            return False
        if self.candidates is not None:
            return method.method_id in self.candidates
        return bool(find_oracle_candidates(method.doc_comment))

    def extract(self, units: Iterable[SourceUnit]) -> tuple[list[Instance], list[tuple[SourceUnit, str]]]:
        instances = []
        failures = []
        for unit in units:
            try:
                methods = extract_methods(unit, self.adapter)
            except UnbalancedBraces as exc:
                warnings.warn(f"{exc} — keeping {len(exc.methods)} method(s) found before it.", stacklevel=2)
                methods = exc.methods
                failures.append((unit, str(exc)))
            instances.extend(method_instance(unit, m, self.task) for m in methods if self._is_candidate(m))
        return instances, failures

    def prompts(self, instance: Instance, variant: PromptVariant) -> list[PromptBundle]:
        return [assemble_prompt(self.template, instance, variant, budget=self.config.context_budget)]

    def _compiles(self, spec: OracleSpec) -> bool:
        if self.adapter is None or not self.adapter.expression_template:
            return True
        for expr in (spec.condition, spec.lhs, spec.rhs):
            if expr is None:
                continue
            code = self.adapter.expression_template.replace("{EXPR}", expr)
            if not compile_check(code, self.adapter).ok:
                return False
        return True

    def postprocess(
        self, instance: Instance, bundle: PromptBundle, raw: str
    ) -> tuple[list[OracleSpec], list[Discard]]:
        spec = parse_oracle_completion(raw, instance.context.get("method_id", ""))
        if spec is None:
            return [], [Discard(raw, "no oracle emitted")]
        if not self._compiles(spec):
            return [], [Discard(raw, "oracle does not compile")]
        spec = replace(expand_names(spec, self.symbols), project=instance.context.get("project", ""))
        return [spec], []

    def complete_record(self, record: RunRecord) -> None:
        pass
