"""Mutant generation from single code lines.

The model completes a ``[[Mutations]]`` list of ``- original |==>
replacement`` rows.  Each row is applied to the line (leftmost occurrence),
the mutated unit is compile-checked, and the mutant is classified by a
token-level diff against the original line.
"""

from collections import Counter
from collections.abc import Iterable
from collections.abc import Mapping
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path
from promptforge.errors import ConfigError
from promptforge.errors import IOFailure
from promptforge.lang_adapter import AdapterSpec
from promptforge.lang_adapter import compile_check
from promptforge.lang_adapter import extract_lines
from promptforge.lang_adapter import filter_allowlisted
from promptforge.lang_adapter import load_allowlist
from promptforge.lang_adapter import split_lines
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

import csv
import io
import logging
import re
import warnings


if TYPE_CHECKING:
    from promptforge.config import TaskConfig


logger = logging.getLogger(__name__)

CODE_MARKER = "[[Code]]"


# ---------------------------------------------------------------------------
# Tokens
# ---------------------------------------------------------------------------


class TokenKind(StrEnum):
    IDENTIFIER = "identifier"
    NUMBER = "number"
    STRING = "string"
    CHAR = "char"
    OPERATOR = "operator"


VALUE_KINDS = frozenset({TokenKind.IDENTIFIER, TokenKind.NUMBER, TokenKind.STRING, TokenKind.CHAR})

_TOKEN_RE = re.compile(
    r"""
    (?P<string>"(?:\\.|[^"\\])*"?)
    |(?P<char>'(?:\\.|[^'\\])*'?)
    |(?P<number>\d[\w.]*|\.\d\w*)
    |(?P<identifier>[A-Za-z_$][\w$]*)
    |(?P<operator>>>>=|<<=|>>=|>>>|->|::|\+\+|--|&&|\|\||[=!<>+\-*/%&|^]=|<<|>>|\S)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    text: str


def tokenize(line: str) -> list[Token]:
    return [Token(TokenKind(m.lastgroup), m.group()) for m in _TOKEN_RE.finditer(line)]


# ---------------------------------------------------------------------------
# Suggestions
# ---------------------------------------------------------------------------


class NotFound(LookupError):
    """The suggested fragment does not occur in the line."""


@dataclass(frozen=True)
class MutantSuggestion:
    original_fragment: str
    replacement: str
    raw_line: str

    def __post_init__(self) -> None:
        if not self.original_fragment:
            raise ValueError("suggestion has an empty original fragment")
        if self.original_fragment == self.replacement:
            raise ValueError(f"suggestion {self.raw_line!r} does not change anything")


_SUGGESTION_RE = re.compile(r"^\s*-\s*(?P<orig>.*?)\s*\|==>(?P<repl>.*)$")


def parse_mutation_completion(text: str) -> list[MutantSuggestion]:
    """Collect ``- orig |==> repl`` rows up to the first ``[[Code]]`` marker."""
    text = text.split(CODE_MARKER, 1)[0]
    suggestions = []
    for line in text.splitlines():
        match = _SUGGESTION_RE.match(line)
        if match is None:
            continue
        orig = match["orig"].strip()
        repl = match["repl"].strip()
        if not orig or orig == repl:
            continue
        suggestions.append(MutantSuggestion(orig, repl, line))
    return suggestions


def apply_suggestion(line: str, suggestion: MutantSuggestion) -> str:
    pos = line.find(suggestion.original_fragment)
    if pos == -1:
        raise NotFound(suggestion.original_fragment)
    end = pos + len(suggestion.original_fragment)
    return line[:pos] + suggestion.replacement + line[end:]


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------


class MutantClass(StrEnum):
    DELETE_STATEMENT = "delete-statement"
    REPLACE_OPERATOR = "replace-operator"
    REPLACE_VALUE = "replace-value"
    OTHER = "other"


_NOOP_RE = re.compile(r"\s*(?:;|\{\s*\}|//.*|/\*.*\*/)?\s*")


def is_noop_statement(line: str) -> bool:
    return _NOOP_RE.fullmatch(line) is not None


def classify_mutant(original_line: str, mutated_line: str) -> MutantClass:
    if is_noop_statement(mutated_line):
        return MutantClass.DELETE_STATEMENT
    before = tokenize(original_line)
    after = tokenize(mutated_line)
    if len(before) != len(after):
        return MutantClass.OTHER
    changed = [(a, b) for a, b in zip(before, after, strict=True) if a.text != b.text]
    if len(changed) != 1:
        return MutantClass.OTHER
    a, b = changed[0]
    if a.kind is TokenKind.OPERATOR and b.kind is TokenKind.OPERATOR:
        return MutantClass.REPLACE_OPERATOR
    if a.kind in VALUE_KINDS and b.kind in VALUE_KINDS:
        return MutantClass.REPLACE_VALUE
    return MutantClass.OTHER


def count_tokens_changed(original_line: str, mutated_line: str) -> int:
    """Token-level Levenshtein distance (unit costs)."""
    a = [t.text for t in tokenize(original_line)]
    b = [t.text for t in tokenize(mutated_line)]
    previous = list(range(len(b) + 1))
    for i, tok_a in enumerate(a, start=1):
        current = [i]
        for j, tok_b in enumerate(b, start=1):
            current.append(
                min(
                    previous[j] + 1,
                    current[j - 1] + 1,
                    previous[j - 1] + (tok_a != tok_b),
                )
            )
        previous = current
    return previous[-1]


# ---------------------------------------------------------------------------
# Mutants
# ---------------------------------------------------------------------------


def normalize_line(line: str) -> str:
    return " ".join(line.split())


@register_artifact("mutant")
@dataclass(frozen=True)
class Mutant:
    instance_id: str
    path: str
    line: int
    original_line: str
    mutated_line: str
    compiles: bool
    kind: MutantClass
    tokens_changed: int

    def __post_init__(self) -> None:
        if self.mutated_line == self.original_line:
            raise ValueError(f"{self.instance_id}: mutant does not change the line")

    @property
    def key(self) -> tuple[str, int, str]:
        return (self.path, self.line, normalize_line(self.mutated_line))

    def to_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "path": self.path,
            "line": self.line,
            "original_line": self.original_line,
            "mutated_line": self.mutated_line,
            "compiles": self.compiles,
            "kind": self.kind.value,
            "tokens_changed": self.tokens_changed,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Mutant":
        return cls(
            instance_id=data["instance_id"],
            path=data["path"],
            line=data["line"],
            original_line=data["original_line"],
            mutated_line=data["mutated_line"],
            compiles=data["compiles"],
            kind=MutantClass(data["kind"]),
            tokens_changed=data["tokens_changed"],
        )


def make_mutant(instance: Instance, mutated_line: str, compiles: bool) -> Mutant:
    original = instance.payload
    return Mutant(
        instance_id=instance.id,
        path=instance.path,
        line=int(instance.context.get("lineno", 0)),
        original_line=original,
        mutated_line=mutated_line,
        compiles=compiles,
        kind=classify_mutant(original, mutated_line),
        tokens_changed=count_tokens_changed(original, mutated_line),
    )


def mutate_unit(unit: SourceUnit, lineno: int, mutated_line: str) -> str:
    """The unit text with physical line *lineno* replaced by *mutated_line*."""
    lines = split_lines(unit.text)
    raw = lines[lineno - 1]
    body = raw.rstrip("\r\n")
    newline = raw[len(body) :]
    indent = body[: len(body) - len(body.lstrip())]
    lines[lineno - 1] = f"{indent}{mutated_line}{newline}" if mutated_line.strip() else newline
    return "".join(lines)


# ---------------------------------------------------------------------------
# Baseline and overlap
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaselineMutant:
    path: str
    line: int
    mutated_line: str

    @property
    def key(self) -> tuple[str, int, str]:
        return (self.path, self.line, normalize_line(self.mutated_line))


def parse_baseline(text: str, source: str = "<baseline>") -> list[BaselineMutant]:
    """Parse ``path,line,mutated_line`` rows; a header row is optional."""
    rows = []
    for index, row in enumerate(csv.reader(io.StringIO(text))):
        if not row:
            continue
        if index == 0 and len(row) >= 2 and not row[1].strip().isdigit():
            continue
        if len(row) != 3 or not row[1].strip().isdigit():
            raise ConfigError(f"{source}: row {index + 1} is not path,line,mutated_line: {row!r}")
        rows.append(BaselineMutant(row[0].strip(), int(row[1]), row[2]))
    return rows


def load_baseline(path: Path) -> list[BaselineMutant]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot read baseline mutants {path}: {exc}") from exc
    return parse_baseline(text, str(path))


def compute_overlap(generated: Iterable[Mutant], baseline: Iterable[BaselineMutant]) -> float:
    """Share of generated mutants that exactly match a baseline mutant."""
    generated_keys = {m.key for m in generated}
    if not generated_keys:
        return 0.0
    baseline_keys = {b.key for b in baseline}
    return len(generated_keys & baseline_keys) / len(generated_keys)


def classify_baseline(baseline: Iterable[BaselineMutant], units: Iterable[SourceUnit]) -> list[Mutant]:
    """Turn baseline rows into mutants against the corpus lines they change."""
    lines = {unit.path: split_lines(unit.text) for unit in units}
    mutants = []
    for row in baseline:
        source = lines.get(row.path)
        if source is None or not 1 <= row.line <= len(source):
            warnings.warn(f"baseline mutant {row.path}:{row.line} is outside the corpus — skipping.", stacklevel=2)
            continue
        original = source[row.line - 1].strip()
        mutated = row.mutated_line.strip()
        if normalize_line(mutated) == normalize_line(original):
            continue
        mutants.append(
            Mutant(
                instance_id=f"{row.path}:{row.line}",
                path=row.path,
                line=row.line,
                original_line=original,
                mutated_line=mutated,
                compiles=True,
                kind=classify_mutant(original, mutated),
                tokens_changed=count_tokens_changed(original, mutated),
            )
        )
    return mutants


# ---------------------------------------------------------------------------
# Summary (one row of the mutation table)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MutationSummary:
    tool: str
    total: int
    compilable: float
    overlap: float | None
    distribution: Mapping[MutantClass, float]
    mean_tokens_changed: float


def summarize_mutants(
    tool: str,
    mutants: Iterable[Mutant],
    baseline: Iterable[BaselineMutant] | None = None,
) -> MutationSummary:
    """Summarize all generated mutants, compiling or not.

    ``total`` and ``compilable`` count every generated mutant; overlap,
    class distribution and tokens changed only consider the compiling ones.
    """
    mutants = list(mutants)
    final = [m for m in mutants if m.compiles]
    counts = Counter(m.kind for m in final)
    distribution = {kind: (counts[kind] / len(final) if final else 0.0) for kind in MutantClass}
    return MutationSummary(
        tool=tool,
        total=len(mutants),
        compilable=len(final) / len(mutants) if mutants else 0.0,
        overlap=None if baseline is None else compute_overlap(final, baseline),
        distribution=distribution,
        mean_tokens_changed=sum(m.tokens_changed for m in final) / len(final) if final else 0.0,
    )


# ---------------------------------------------------------------------------
# Pipeline tool
# ---------------------------------------------------------------------------


class MutationTool:
    task = Task.MUTATION

    def __init__(self, config: "TaskConfig", template: PromptTemplate) -> None:
        if config.adapter is None:
            raise ConfigError("the mutation task needs an [adapter] compile_cmd")
        self.config = config
        self.template = template
        self.adapter: AdapterSpec = config.adapter
        self.allowlist = load_allowlist(config.allowlist) if config.allowlist else None
        self._units: dict[str, SourceUnit] = {}

    def extract(self, units: Iterable[SourceUnit]) -> tuple[list[Instance], list[tuple[SourceUnit, str]]]:
        instances: list[Instance] = []
        for unit in units:
            self._units[unit.path] = unit
            instances.extend(extract_lines(unit))
        if self.allowlist is not None:
            instances = filter_allowlisted(instances, self.allowlist)
        return instances, []

    def prompts(self, instance: Instance, variant: PromptVariant) -> list[PromptBundle]:
        return [assemble_prompt(self.template, instance, variant, budget=self.config.context_budget)]

    def postprocess(self, instance: Instance, bundle: PromptBundle, raw: str) -> tuple[list[Mutant], list[Discard]]:
        suggestions = parse_mutation_completion(raw)
        if not suggestions:
            return [], [Discard(raw, "no mutation parsed")]
        mutants: list[Mutant] = []
        discards: list[Discard] = []
        seen: set[str] = set()
        for suggestion in suggestions:
            try:
                mutated = apply_suggestion(instance.payload, suggestion)
            except NotFound:
                discards.append(Discard(suggestion.raw_line, f"fragment not found: {suggestion.original_fragment}"))
                continue
            if mutated == instance.payload or mutated in seen:
                discards.append(Discard(suggestion.raw_line, "duplicate mutant"))
                continue
            seen.add(mutated)
            unit = self._units[instance.path]
            lineno = int(instance.context["lineno"])
            verdict = compile_check(mutate_unit(unit, lineno, mutated), self.adapter)
            if not verdict.ok:
                logger.debug("%s: mutant does not compile: %s", instance.id, verdict.diagnostics)
            mutants.append(make_mutant(instance, mutated, verdict.ok))
        return mutants, discards

    def complete_record(self, record: RunRecord) -> None:
        pass
