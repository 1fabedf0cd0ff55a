"""Everything specific to the target source language.

The built-in scanner understands C-family brace syntax (Java first of
all): it masks comments and literals, matches braces, and recovers
statement lines and method declarations.  Compiling and measuring
coverage are delegated to external commands configured as templates
with ``{file}``, ``{dir}``, ``{tests}`` and ``{out}`` placeholders.
"""

from collections.abc import Iterable
from collections.abc import Mapping
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from promptforge.errors import AdapterFailure
from promptforge.errors import ConfigError
from promptforge.errors import IOFailure
from promptforge.errors import UnbalancedBraces
from promptforge.errors import UnparseableReport
from promptforge.records import Instance
from promptforge.records import SourceUnit
from promptforge.records import Task
from typing import Any

import csv
import io
import json
import re
import shlex
import subprocess
import tempfile
import warnings


# ---------------------------------------------------------------------------
# Adapter configuration
# ---------------------------------------------------------------------------

DEFAULT_TEST_TEMPLATE = """\
class GeneratedTest {
    {TEST_BODY}
}
"""


@dataclass(frozen=True)
class AdapterSpec:
    compile_cmd: str
    coverage_cmd: str | None = None
    extract_cmd: str | None = None
    test_class_template: str = DEFAULT_TEST_TEMPLATE
    expression_template: str | None = None
    timeout_s: int = 60
    source_suffix: str = ".java"
    language: str = "java"

    def __post_init__(self) -> None:
        if not self.compile_cmd.strip():
            raise ConfigError("adapter compile_cmd must not be empty")
        if self.timeout_s < 1:
            raise ConfigError("adapter timeout_s must be >= 1")


@dataclass(frozen=True)
class CompileResult:
    ok: bool
    diagnostics: str = ""


# ---------------------------------------------------------------------------
# Corpus loading
# ---------------------------------------------------------------------------


def project_of(path: str) -> str:
    """First directory of a corpus-relative path; files at the top are ``default``."""
    head, sep, _ = path.partition("/")
    return head if sep else "default"


def load_corpus(patterns: Iterable[str], base_dir: Path, language: str = "java") -> list[SourceUnit]:
    """Read every file matching *patterns* (globs relative to *base_dir*).

    Paths are stored relative to *base_dir* so instance ids do not depend
    on where the corpus is checked out.  Files that are not UTF-8 are
    skipped with a warning.
    """
    base_dir = Path(base_dir)
    seen: set[Path] = set()
    units = []
    for pattern in patterns:
        for path in sorted(base_dir.glob(pattern)):
            if not path.is_file() or path in seen:
                continue
            seen.add(path)
            try:
                text = path.read_text(encoding="utf-8")
            except UnicodeDecodeError:
                warnings.warn(
                    f"{path} is not UTF-8 encoded — skipping.",
                    stacklevel=2,
                )
                continue
            except OSError as exc:
                raise IOFailure(f"cannot read {path}: {exc}") from exc
            rel = path.relative_to(base_dir).as_posix() if path.is_relative_to(base_dir) else path.as_posix()
            units.append(SourceUnit(path=rel, text=text, language_tag=language))
    units.sort(key=lambda u: u.path)
    return units


# ---------------------------------------------------------------------------
# Lexical scanning
# ---------------------------------------------------------------------------


_RE_LINE_BREAK = re.compile(r"[\r\n]")


def split_lines(text: str) -> list[str]:
    """Physical lines with their terminators (``\\r\\n``, ``\\r`` or ``\\n``).

    Unlike ``str.splitlines`` no other character ends a line, so the
    numbering matches a Java compiler's.
    """
    return re.findall(r"[^\r\n]*(?:\r\n|\r|\n)|[^\r\n]+$", text)


def scan_segments(text: str) -> list[tuple[str, int, int]]:
    """Split *text* into ``(kind, start, end)`` segments.

    Kinds: ``code``, ``line_comment``, ``block_comment``, ``string``,
    ``char``.  Unterminated literals end at the line break; unterminated
    block comments run to the end of the text.
    """
    segments = []
    n = len(text)
    i = 0
    code_start = 0
    while i < n:
        ch = text[i]
        if text.startswith("//", i):
            kind = "line_comment"
            brk = _RE_LINE_BREAK.search(text, i)
            end = n if brk is None else brk.start()
        elif text.startswith("/*", i):
            kind = "block_comment"
            end = text.find("*/", i + 2)
            end = n if end == -1 else end + 2
        elif ch in "\"'":
            kind = "string" if ch == '"' else "char"
            j = i + 1
            while j < n and text[j] != ch and text[j] not in "\r\n":
                j += 2 if text[j] == "\\" else 1
            end = min(j + 1, n)
        else:
            i += 1
            continue
        if code_start < i:
            segments.append(("code", code_start, i))
        segments.append((kind, i, end))
        i = end
        code_start = end
    if code_start < n:
        segments.append(("code", code_start, n))
    return segments


def mask_code(text: str, keep: frozenset[str] = frozenset({"code"})) -> str:
    """Blank every segment whose kind is not in *keep*, preserving offsets."""
    parts = []
    for kind, start, end in scan_segments(text):
        chunk = text[start:end]
        if kind in keep:
            parts.append(chunk)
        else:
            parts.append(re.sub(r"[^\r\n]", " ", chunk))
    return "".join(parts)


def strip_line_comments(text: str) -> str:
    return "".join(
        text[start:end] for kind, start, end in scan_segments(text) if kind != "line_comment"
    )


def find_balanced_end(text: str, open_pos: int) -> int | None:
    """Index just past the brace matching the one at *open_pos*, or None."""
    masked = mask_code(text)
    depth = 0
    for pos in range(open_pos, len(masked)):
        ch = masked[pos]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return pos + 1
    return None


# ---------------------------------------------------------------------------
# Line extraction (code mutation instances)
# ---------------------------------------------------------------------------

_CONTROL_WORDS = frozenset(
    {"if", "for", "while", "switch", "catch", "synchronized", "return", "new", "else", "do", "try", "throw"}
)
_KEYWORD_ONLY_WORDS = frozenset(
    {"else", "try", "finally", "do", "default", "break", "continue", "return", "static", "case"}
)
_RE_ANNOTATIONS = re.compile(r"\s*(?:@[\w$.]+(?:\s*\([^()]*\))?\s*)*")
_RE_ANNOTATION_ARGS = re.compile(r"(@[\w$.]+)\s*\([^()]*\)")
_RE_CLASS_HEADER = re.compile(r"\b(class|interface|enum|record)\s+([A-Za-z_$][\w$]*)")
_RE_METHOD_HEADER = re.compile(
    r"^(?P<prefix>[\w$<>\[\],.?\s]*?)\b(?P<name>[A-Za-z_$][\w$]*)\s*"
    r"\((?P<params>[^()]*)\)\s*(?:throws\s+[\w$.,<>\s]+)?$"
)
_RE_PUBLIC_TYPE = re.compile(
    r"\bpublic\s+(?:(?:final|abstract|static)\s+)*(?:class|interface|enum|record)\s+([A-Za-z_$][\w$]*)"
)


def parse_method_header(header: str, constructor_of: str | None = None) -> re.Match | None:
    """Match a method declaration header (modifiers, type, name, params).

    A header without modifiers or return type is accepted only when its
    name equals *constructor_of*.
    """
    match = _RE_METHOD_HEADER.match(header)
    if match is None or match["name"] in _CONTROL_WORDS:
        return None
    prefix = match["prefix"]
    prefix_words = prefix.split()
    if not prefix_words and match["name"] != constructor_of:
        return None
    if prefix.rstrip().endswith("."):
        return None
    # "synchronized" doubles as a modifier.
    if any(word in _CONTROL_WORDS and word != "synchronized" for word in prefix_words):
        return None
    return match


def strip_annotation_args(header: str) -> str:
    """Drop annotation argument lists, innermost first.

    ``@A(b = @B(1)) int x`` becomes ``@A int x``.
    """
    while True:
        stripped = _RE_ANNOTATION_ARGS.sub(r"\1", header)
        if stripped == header:
            return header
        header = stripped


def _is_declaration(code: str) -> bool:
    header = code.rstrip("{ ").strip()
    if _RE_CLASS_HEADER.search(header) and not header.startswith("new "):
        return True
    if re.fullmatch(r"@[\w$.]+(?:\s*\(.*\))?", header):
        return True
    return parse_method_header(" ".join(header.split())) is not None


def _is_mutation_candidate(code: str) -> bool:
    code = code.strip()
    if not code:
        return False
    if code.startswith(("import ", "package ")):
        return False
    if re.fullmatch(r"[{}();,\s]*", code):
        return False
    words = re.sub(r"[{}();:]", " ", code).split()
    if words and all(word in _KEYWORD_ONLY_WORDS for word in words):
        return False
    return not _is_declaration(code)


def _enclosing_class(masked: str, offset: int) -> str:
    names = [m.group(2) for m in _RE_CLASS_HEADER.finditer(masked, 0, offset)]
    return names[-1] if names else ""


def extract_lines(unit: SourceUnit) -> list[Instance]:
    """Return one mutation instance per statement-like physical line.

    Skips blank and comment-only lines, ``import``/``package`` lines,
    lines made only of braces or bare keywords, and type/method
    declarations.  Payloads are the stripped line text, so each appears
    verbatim in the unit.
    """
    masked = mask_code(unit.text)
    instances = []
    offset = 0
    raw_lines = split_lines(unit.text)
    masked_lines = split_lines(masked)
    for lineno, (raw, code) in enumerate(zip(raw_lines, masked_lines, strict=True), start=1):
        line_offset = offset
        offset += len(raw)
        if not _is_mutation_candidate(code):
            continue
        payload = raw.strip()
        indent = raw[: len(raw) - len(raw.lstrip())]
        instances.append(
            Instance(
                id=f"{unit.path}:{lineno}",
                task=Task.MUTATION,
                payload=payload,
                context={
                    "line": payload,
                    "path": unit.path,
                    "lineno": str(lineno),
                    "indent": indent,
                    "class_name": _enclosing_class(masked, line_offset),
                },
                path=unit.path,
                offset=line_offset,
            )
        )
    return instances


def load_allowlist(path: Path) -> frozenset[tuple[str, int]]:
    """Read a ``path:line`` per row allowlist."""
    entries = set()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot read allowlist {path}: {exc}") from exc
    for row in text.splitlines():
        row = row.strip()
        if not row or row.startswith("#"):
            continue
        file_part, _, line_part = row.rpartition(":")
        if not file_part or not line_part.isdigit():
            raise ConfigError(f"bad allowlist row {row!r} in {path}")
        entries.add((file_part, int(line_part)))
    return frozenset(entries)


def filter_allowlisted(
    instances: Iterable[Instance], allowlist: frozenset[tuple[str, int]]
) -> list[Instance]:
    return [i for i in instances if (i.path, int(i.context["lineno"])) in allowlist]


# ---------------------------------------------------------------------------
# Method extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodInfo:
    signature: str
    body: str
    doc_comment: str | None
    helpers: tuple[str, ...]
    byte_range: tuple[int, int]
    name: str = ""
    class_name: str = ""
    params: tuple[tuple[str, str], ...] = ()
    code: str = ""

    @property
    def param_types(self) -> tuple[str, ...]:
        return tuple(ptype for ptype, _ in self.params)

    @property
    def method_id(self) -> str:
        owner = f"{self.class_name}." if self.class_name else ""
        return f"{owner}{self.name}({','.join(self.param_types)})"

    @property
    def is_public(self) -> bool:
        return "public" in self.signature.split("(", 1)[0].split()

    @property
    def is_constructor(self) -> bool:
        return bool(self.class_name) and self.name == self.class_name

    @property
    def short_signature(self) -> str:
        """``Name(Type a, Type b)`` without modifiers or return type."""
        params = ", ".join(f"{ptype} {pname}" for ptype, pname in self.params)
        return f"{self.name}({params})"

    def to_dict(self) -> dict[str, Any]:
        return {
            "signature": self.signature,
            "body": self.body,
            "doc_comment": self.doc_comment,
            "helpers": list(self.helpers),
            "byte_range": list(self.byte_range),
            "name": self.name,
            "class_name": self.class_name,
            "params": [list(p) for p in self.params],
            "code": self.code,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MethodInfo":
        signature = data["signature"]
        match = parse_method_header(" ".join(signature.split()))
        name = data.get("name") or (match["name"] if match else "")
        params = data.get("params")
        if params is None:
            params = _split_params(match["params"]) if match else ()
        start, end = data.get("byte_range", (0, 0))
        return cls(
            signature=signature,
            body=data["body"],
            doc_comment=data.get("doc_comment"),
            helpers=tuple(data.get("helpers", ())),
            byte_range=(int(start), int(end)),
            name=name,
            class_name=data.get("class_name", ""),
            params=tuple(tuple(p) for p in params),
            code=data.get("code") or f"{signature} {data['body']}",
        )


def _split_params(params: str) -> tuple[tuple[str, str], ...]:
    result = []
    depth = 0
    current = ""
    for ch in params + ",":
        if ch == "<":
            depth += 1
        elif ch == ">":
            depth -= 1
        if ch == "," and depth == 0:
            words = re.sub(r"@[\w$.]+", " ", current).replace("final ", " ").split()
            if len(words) >= 2:
                result.append((" ".join(words[:-1]), words[-1]))
            current = ""
        else:
            current += ch
    return tuple(result)


def _clean_doc_comment(raw: str) -> str:
    body = raw.removeprefix("/**").removeprefix("/*").removesuffix("*/")
    lines = [re.sub(r"^\s*\*?\s?", "", line).rstrip() for line in body.splitlines()]
    return "\n".join(lines).strip()


@dataclass
class _Open:
    kind: str
    position: int
    class_name: str = ""
    signature: str = ""
    sig_start: int = 0
    doc_comment: str | None = None
    header: re.Match | None = None


def extract_methods(unit: SourceUnit, spec: AdapterSpec | None = None) -> list[MethodInfo]:
    """Recover method declarations with a brace-matching scan.

    Only methods directly inside a type body (or at top level, for
    snippet files) are reported; methods of local or anonymous classes
    inside a method body are part of that method, so byte ranges never
    overlap.  Raises ``UnbalancedBraces`` carrying the methods completed
    before the fault.
    """
    if spec is not None and spec.extract_cmd:
        return extract_methods_external(unit, spec)

    text = unit.text
    segments = scan_segments(text)
    masked = mask_code(text)
    block_comments = [(s, e) for kind, s, e in segments if kind == "block_comment"]

    found: list[tuple[int, int, str, str, str | None, re.Match, str]] = []
    stack: list[_Open] = []
    boundary = 0
    # Braces inside parentheses belong to annotation values or lambdas.
    parens = 0

    def recovered() -> list[MethodInfo]:
        return _finish_methods(text, found)

    for pos, ch in enumerate(masked):
        if ch == "(":
            parens += 1
        elif ch == ")":
            parens = max(parens - 1, 0)
        elif parens:
            continue
        elif ch == ";":
            boundary = pos + 1
        elif ch == "{":
            header_region = masked[boundary:pos]
            lead = _RE_ANNOTATIONS.match(header_region)
            sig_start = boundary + (lead.end() if lead else 0)
            header = strip_annotation_args(" ".join(masked[sig_start:pos].split()))
            parent = stack[-1] if stack else None
            in_method = any(o.kind == "method" for o in stack)
            class_match = _RE_CLASS_HEADER.search(header)
            owner = parent.class_name if parent is not None and parent.kind == "class" else None
            method_match = parse_method_header(header, owner) if not class_match else None
            if class_match and not header.startswith("new "):
                stack.append(_Open("class", pos, class_name=class_match.group(2)))
            elif (
                method_match is not None
                and not in_method
                and (parent is None or parent.kind == "class")
            ):
                doc = None
                for c_start, c_end in reversed(block_comments):
                    if c_start >= boundary and c_end <= sig_start:
                        doc = _clean_doc_comment(text[c_start:c_end])
                        break
                stack.append(
                    _Open(
                        "method",
                        pos,
                        class_name=parent.class_name if parent else "",
                        signature=header,
                        sig_start=sig_start,
                        doc_comment=doc,
                        header=method_match,
                    )
                )
            else:
                stack.append(_Open("block", pos))
            boundary = pos + 1
        elif ch == "}":
            if not stack:
                raise UnbalancedBraces(unit.path, pos, recovered())
            opened = stack.pop()
            if opened.kind == "method":
                found.append(
                    (
                        opened.sig_start,
                        pos + 1,
                        opened.signature,
                        opened.class_name,
                        opened.doc_comment,
                        opened.header,
                        text[opened.position : pos + 1],
                    )
                )
            boundary = pos + 1
    if stack:
        raise UnbalancedBraces(unit.path, stack[-1].position, recovered())
    return recovered()


def _finish_methods(text: str, found: list) -> list[MethodInfo]:
    found = sorted(found, key=lambda f: f[0])
    signatures = [f[2] for f in found]
    methods = []
    for index, (start, end, signature, class_name, doc, header, body) in enumerate(found):
        helpers = tuple(sig for i, sig in enumerate(signatures) if i != index)
        methods.append(
            MethodInfo(
                signature=signature,
                body=body,
                doc_comment=doc,
                helpers=helpers,
                byte_range=(start, end),
                name=header["name"],
                class_name=class_name,
                params=_split_params(header["params"]),
                code=text[start:end],
            )
        )
    return methods


def extract_methods_external(unit: SourceUnit, spec: AdapterSpec) -> list[MethodInfo]:
    """Run ``extract_cmd`` on the unit; it prints a JSON array of methods."""
    with tempfile.TemporaryDirectory(prefix="promptforge-") as tmp:
        source = Path(tmp) / Path(unit.path).name
        source.write_text(unit.text, encoding="utf-8")
        result = _run(spec.extract_cmd or "", spec.timeout_s, file=str(source), dir=tmp)
    if result is None:
        raise AdapterFailure(f"extract_cmd timed out on {unit.path}")
    if result.returncode != 0:
        raise AdapterFailure(f"extract_cmd failed on {unit.path}: {result.stderr.strip()}")
    try:
        rows = json.loads(result.stdout)
    except json.JSONDecodeError as exc:
        raise AdapterFailure(f"extract_cmd printed invalid JSON for {unit.path}: {exc}") from exc
    return [MethodInfo.from_dict(row) for row in rows]


# ---------------------------------------------------------------------------
# External commands
# ---------------------------------------------------------------------------


def render_command(template: str, **values: str | list[str]) -> list[str]:
    """Split *template* like a shell would and fill its placeholders.

    An argument that is exactly ``{name}`` for a list value expands to one
    argument per item; embedded placeholders are replaced textually.
    """
    args: list[str] = []
    for arg in shlex.split(template):
        expanded = False
        for name, value in values.items():
            if isinstance(value, list) and arg == f"{{{name}}}":
                args.extend(value)
                expanded = True
                break
        if expanded:
            continue
        for name, value in values.items():
            text = " ".join(value) if isinstance(value, list) else value
            arg = arg.replace(f"{{{name}}}", text)
        args.append(arg)
    return args


def _run(template: str, timeout_s: int, **values: str | list[str]) -> subprocess.CompletedProcess | None:
    args = render_command(template, **values)
    if not args:
        raise AdapterFailure(f"empty command template {template!r}")
    try:
        return subprocess.run(args, capture_output=True, text=True, timeout=timeout_s)
    except subprocess.TimeoutExpired:
        return None
    except OSError as exc:
        raise AdapterFailure(f"cannot launch {args[0]!r}: {exc}") from exc


def unit_file_name(code: str, suffix: str) -> str:
    """File name a compiler expects for *code* (Java: the public type)."""
    match = _RE_PUBLIC_TYPE.search(mask_code(code))
    return f"{match.group(1) if match else 'Unit'}{suffix}"


def compile_check(code: str, spec: AdapterSpec) -> CompileResult:
    with tempfile.TemporaryDirectory(prefix="promptforge-") as tmp:
        source = Path(tmp) / unit_file_name(code, spec.source_suffix)
        source.write_text(code, encoding="utf-8")
        result = _run(spec.compile_cmd, spec.timeout_s, file=str(source), dir=tmp)
    if result is None:
        return CompileResult(ok=False, diagnostics="timeout")
    diagnostics = "\n".join(part.strip() for part in (result.stderr, result.stdout) if part.strip())
    return CompileResult(ok=result.returncode == 0, diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# Coverage
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoverageMap:
    """Instrumented source lines and whether any test covered them."""

    lines: Mapping[tuple[str, int], bool] = field(default_factory=dict)

    @property
    def instrumented(self) -> frozenset[tuple[str, int]]:
        return frozenset(self.lines)

    @property
    def covered(self) -> frozenset[tuple[str, int]]:
        return frozenset(key for key, hit in self.lines.items() if hit)

    @property
    def percent(self) -> float:
        """Covered over instrumented lines, as a fraction in [0, 1]."""
        if not self.lines:
            return 0.0
        return len(self.covered) / len(self.lines)

    def restricted(self, path: str) -> "CoverageMap":
        return CoverageMap({key: hit for key, hit in self.lines.items() if key[0] == path})

    def merged(self, other: "CoverageMap") -> "CoverageMap":
        """OR the hit flags; the instrumented universes are united."""
        lines = dict(self.lines)
        for key, hit in other.lines.items():
            lines[key] = lines.get(key, False) or hit
        return CoverageMap(lines)


def parse_coverage_csv(text: str, source: str = "<report>") -> CoverageMap:
    """Parse ``path,line,covered`` rows (optional header, duplicates OR-ed)."""
    lines: dict[tuple[str, int], bool] = {}
    for index, row in enumerate(csv.reader(io.StringIO(text))):
        if not row or not "".join(row).strip():
            continue
        if index == 0 and len(row) == 3 and not row[1].strip().isdigit():
            continue
        if len(row) != 3:
            raise UnparseableReport(f"{source}: row {index + 1} has {len(row)} fields, expected 3")
        path, line, hit = (cell.strip() for cell in row)
        if not line.isdigit() or hit not in ("0", "1"):
            raise UnparseableReport(f"{source}: row {index + 1} is not path,line,0|1: {row!r}")
        key = (path, int(line))
        lines[key] = lines.get(key, False) or hit == "1"
    return CoverageMap(lines)


def load_coverage_map(path: Path) -> CoverageMap:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot read coverage map {path}: {exc}") from exc
    return parse_coverage_csv(text, source=str(path))


def run_coverage(tests: list[Path], spec: AdapterSpec) -> CoverageMap:
    if not tests:
        return CoverageMap()
    if not spec.coverage_cmd:
        raise ConfigError("adapter coverage_cmd is not configured")
    with tempfile.TemporaryDirectory(prefix="promptforge-") as tmp:
        out = Path(tmp) / "coverage.csv"
        result = _run(
            spec.coverage_cmd,
            spec.timeout_s,
            tests=[str(t) for t in tests],
            out=str(out),
            dir=tmp,
        )
        if result is None:
            raise AdapterFailure("coverage_cmd timed out")
        if not out.exists():
            raise AdapterFailure(
                f"coverage_cmd exited {result.returncode} without writing a report: "
                f"{result.stderr.strip()}"
            )
        return parse_coverage_csv(out.read_text(encoding="utf-8"), source=spec.coverage_cmd)
