"""Prompt templates and prompt assembly.

A template is a YAML file with these sections (all text, ``str.format``
placeholders filled from the instance context):

- ``description``: natural-language task description, first in the prompt.
- ``nl_only_description``: longer description used by the NL-only variant
  (spells out the output format); falls back to ``description``.
- ``preamble``: instance-specific text placed before the examples.
- ``example_format`` / ``example_format_ex_only``: how one bank entry is
  rendered; the ex-only form drops natural-language parts of an example.
- ``instance_format`` / ``instance_format_ex_only``: the instance block the
  model completes.
- ``examples`` / ``bad_examples``: the example bank and its adversarial
  counterpart; ``bad_examples_mode`` says whether the bad examples are
  appended to the bank or replace it.
- ``stop``, ``temperature``, ``max_tokens``: request parameters.
"""

from collections.abc import Iterable
from collections.abc import Mapping
from collections.abc import Sequence
from dataclasses import dataclass
from dataclasses import replace
from pathlib import Path
from promptforge.errors import BadTemplate
from promptforge.errors import ConfigError
from promptforge.errors import ContextBudgetExceeded
from promptforge.errors import MissingContextKey
from promptforge.records import approx_tokens
from promptforge.records import Instance
from promptforge.records import PromptBundle
from promptforge.records import PromptVariant
from promptforge.records import Task
from typing import Any

import json
import logging
import string
import yaml


logger = logging.getLogger(__name__)

TEMPLATES_DIR = Path(__file__).resolve().parent / "templates"
DEFAULT_CONTEXT_BUDGET = 4096

_FORMATTER = string.Formatter()


@dataclass(frozen=True)
class PromptTemplate:
    task: Task
    instance_format: str
    example_format: str = ""
    description: str = ""
    nl_only_description: str = ""
    preamble: str = ""
    example_format_ex_only: str = ""
    instance_format_ex_only: str = ""
    examples: tuple[Mapping[str, str], ...] = ()
    bad_examples: tuple[Mapping[str, str], ...] = ()
    bad_examples_mode: str = "append"
    stop: tuple[str, ...] = ()
    temperature: float = 0.0
    max_tokens: int = 256

    def __post_init__(self) -> None:
        if self.bad_examples_mode not in ("append", "replace"):
            raise BadTemplate(f"bad_examples_mode must be 'append' or 'replace', not {self.bad_examples_mode!r}")
        if not self.stop:
            raise BadTemplate(f"{self.task} template declares no stop sequence")

    def with_examples(
        self,
        examples: Iterable[Mapping[str, str]] | None = None,
        bad_examples: Iterable[Mapping[str, str]] | None = None,
    ) -> "PromptTemplate":
        changes: dict[str, Any] = {}
        if examples is not None:
            changes["examples"] = tuple(examples)
        if bad_examples is not None:
            changes["bad_examples"] = tuple(bad_examples)
        return replace(self, **changes)

    def bank_for(self, variant: PromptVariant) -> tuple[Mapping[str, str], ...]:
        """Examples shown for *variant* (none at all for NL-only)."""
        if variant is PromptVariant.NL_ONLY:
            return ()
        if variant is PromptVariant.BAD_EX:
            if self.bad_examples_mode == "replace":
                return self.bad_examples
            return self.examples + self.bad_examples
        return self.examples


def _field_names(text: str) -> list[str]:
    names = []
    try:
        parsed = list(_FORMATTER.parse(text))
    except ValueError as exc:
        raise BadTemplate(f"malformed placeholder in {text[:60]!r}: {exc}") from exc
    for _, field_name, _, _ in parsed:
        if field_name is None or field_name == "":
            continue
        root = field_name.split(".", 1)[0].split("[", 1)[0]
        if root not in names:
            names.append(root)
    return names


def _sections(template: PromptTemplate, variant: PromptVariant) -> tuple[str, str, str, str]:
    """(description, preamble, example_format, instance_format) for *variant*."""
    if variant is PromptVariant.EX_ONLY:
        return (
            "",
            template.preamble,
            template.example_format_ex_only or template.example_format,
            template.instance_format_ex_only or template.instance_format,
        )
    description = template.description
    if variant is PromptVariant.NL_ONLY:
        description = template.nl_only_description or template.description
    return description, template.preamble, template.example_format, template.instance_format


def required_keys(template: PromptTemplate, variant: PromptVariant = PromptVariant.DEFAULT) -> list[str]:
    """Context keys the instance must provide, in order of first use."""
    keys: list[str] = []
    description, preamble, _, instance_format = _sections(template, variant)
    for text in (description, preamble, instance_format):
        for name in _field_names(text):
            if name not in keys:
                keys.append(name)
    return keys


def _as_section(text: str) -> str:
    text = text.rstrip("\n")
    return f"{text}\n" if text else ""


def _render_example(example_format: str, example: Mapping[str, str]) -> str:
    try:
        return _as_section(example_format.format_map(example))
    except KeyError as exc:
        raise BadTemplate(f"example lacks field {exc.args[0]!r} used by example_format") from exc


def assemble_prompt(
    template: PromptTemplate,
    instance: Instance,
    variant: PromptVariant = PromptVariant.DEFAULT,
    *,
    budget: int = DEFAULT_CONTEXT_BUDGET,
    examples: Sequence[Mapping[str, str]] | None = None,
    temperature: float | None = None,
    query_index: int = 0,
) -> PromptBundle:
    """Build the prompt text for *instance*.

    The text is the description (absent for ex-only), the preamble, the
    rendered examples (absent for nl-only) and the instance block, in that
    order.  *examples* overrides the template's bank.  While the prompt plus
    ``max_tokens`` exceeds *budget*, the oldest example is dropped; the
    count is kept on the bundle.
    """
    values = {**instance.context, "payload": instance.payload}
    for key in required_keys(template, variant):
        if key not in values:
            raise MissingContextKey(key)

    description, preamble, example_format, instance_format = _sections(template, variant)
    head = _as_section(description.format_map(values)) + _as_section(preamble.format_map(values))
    tail = instance_format.format_map(values)

    if variant is PromptVariant.NL_ONLY:
        bank: list[Mapping[str, str]] = []
    elif examples is not None:
        bank = list(examples)
    else:
        bank = list(template.bank_for(variant))
    rendered = [_render_example(example_format, example) for example in bank]

    dropped = 0
    text = head + "".join(rendered) + tail
    while approx_tokens(text) + template.max_tokens > budget:
        if not rendered:
            raise ContextBudgetExceeded(
                f"{instance.id}: prompt needs {approx_tokens(text)} + {template.max_tokens} tokens, "
                f"budget is {budget}"
            )
        rendered.pop(0)
        dropped += 1
        text = head + "".join(rendered) + tail
    if dropped:
        logger.debug("%s: dropped %d example(s) to fit the context budget", instance.id, dropped)

    return PromptBundle(
        instance_id=instance.id,
        variant=variant,
        text=text,
        stop_sequences=template.stop,
        temperature=template.temperature if temperature is None else temperature,
        max_tokens=template.max_tokens,
        query_index=query_index,
        dropped_examples=dropped,
    )


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _examples(raw: Any, source: Path | str) -> tuple[dict[str, str], ...]:
    if raw is None:
        return ()
    if not isinstance(raw, list) or not all(isinstance(e, dict) for e in raw):
        raise ConfigError(f"{source}: examples must be a list of mappings")
    return tuple({str(k): "" if v is None else str(v) for k, v in e.items()} for e in raw)


def template_from_mapping(data: Mapping[str, Any], source: Path | str = "<template>") -> PromptTemplate:
    try:
        task = Task(data["task"])
        instance_format = data["instance_format"]
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{source}: template needs a valid 'task' and 'instance_format' ({exc})") from exc
    stop = data.get("stop") or ()
    if isinstance(stop, str):
        stop = (stop,)
    return PromptTemplate(
        task=task,
        instance_format=instance_format,
        example_format=data.get("example_format") or "",
        description=data.get("description") or "",
        nl_only_description=data.get("nl_only_description") or "",
        preamble=data.get("preamble") or "",
        example_format_ex_only=data.get("example_format_ex_only") or "",
        instance_format_ex_only=data.get("instance_format_ex_only") or "",
        examples=_examples(data.get("examples"), source),
        bad_examples=_examples(data.get("bad_examples"), source),
        bad_examples_mode=data.get("bad_examples_mode", "append"),
        stop=tuple(stop),
        temperature=float(data.get("temperature", 0.0)),
        max_tokens=int(data.get("max_tokens", 256)),
    )


def load_template(path: Path) -> PromptTemplate:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot load prompt template {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: prompt template must be a mapping")
    return template_from_mapping(data, path)


def load_bundled_template(task: Task) -> PromptTemplate:
    return load_template(TEMPLATES_DIR / f"{task.value}.yaml")


def load_example_bank(path: Path) -> tuple[tuple[dict[str, str], ...], tuple[dict[str, str], ...] | None]:
    """Read an example bank file (YAML or JSON).

    Either a bare list of examples, or a mapping with ``examples`` and an
    optional ``bad_examples`` list.  Returns ``(examples, bad_examples)``;
    the second item is None when the file does not set it.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (OSError, ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot load example bank {path}: {exc}") from exc
    if isinstance(data, list):
        return _examples(data, path), None
    if isinstance(data, dict):
        bad = data.get("bad_examples")
        return _examples(data.get("examples"), path), None if bad is None else _examples(bad, path)
    raise ConfigError(f"{path}: example bank must be a list or a mapping")
