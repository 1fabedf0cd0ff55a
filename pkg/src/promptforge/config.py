"""Run configuration.

A run is described by one TOML or JSON file::

    task = "mutation"
    corpus = ["src/**/*.java"]
    variant = "default"
    output_dir = "out/mutation"

    [backend]
    kind = "http"
    model = "code-davinci-002"
    base_url = "https://api.example.com/v1"

    [adapter]
    compile_cmd = "javac -d {dir} {file}"

Relative paths are resolved against the directory of the config file.
Values are layered: command-line flags over ``PROMPTFORGE_*`` environment
variables over the file over the defaults below.
"""

from collections.abc import Mapping
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from pathlib import Path
from promptforge.errors import ConfigError
from promptforge.lang_adapter import AdapterSpec
from promptforge.lang_adapter import DEFAULT_TEST_TEMPLATE
from promptforge.prompts import DEFAULT_CONTEXT_BUDGET
from promptforge.prompts import load_bundled_template
from promptforge.prompts import load_example_bank
from promptforge.prompts import load_template
from promptforge.prompts import PromptTemplate
from promptforge.records import PromptVariant
from promptforge.records import Task
from promptforge.testgen import TemperatureSchedule
from typing import Any

import json
import logging
import os
import tomlkit


logger = logging.getLogger(__name__)

DEFAULT_WORKERS = 4

# Environment variable -> dotted config key.
ENV_OVERRIDES = {
    "PROMPTFORGE_BACKEND": "backend.kind",
    "PROMPTFORGE_MODEL": "backend.model",
    "PROMPTFORGE_BASE_URL": "backend.base_url",
    "PROMPTFORGE_OUT": "output_dir",
    "PROMPTFORGE_WORKERS": "workers",
}

# Keys holding paths; values coming from flags or the environment are
# taken relative to the working directory, not to the config file.
_PATH_KEYS = frozenset(
    {
        "output_dir",
        "allowlist",
        "backend.bank",
        "prompt.template",
        "prompt.example_bank",
        "adapter.test_class_template_file",
        "mutation.baseline",
        "oracle.ground_truth",
        "oracle.symbols",
        "oracle.candidates",
        "oracle.baseline",
        "testgen.coverage_map",
        "testgen.methods",
    }
)

BACKEND_KINDS = ("scripted", "http")
EXAMPLE_SELECTIONS = ("same-class", "random")


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "scripted"
    model: str = "scripted"
    base_url: str | None = None
    bank: Path | None = None
    max_in_flight: int = 10
    timeout_s: float = 60.0
    max_attempts: int = 5


@dataclass(frozen=True)
class MutationConfig:
    baseline: Path | None = None


@dataclass(frozen=True)
class OracleConfig:
    ground_truth: Path | None = None
    symbols: Path | None = None
    candidates: Path | None = None
    baseline: Path | None = None


@dataclass(frozen=True)
class TestgenConfig:
    schedule: TemperatureSchedule = field(default_factory=TemperatureSchedule)
    example_selection: str = "same-class"
    coverage_map: Path | None = None
    methods: Path | None = None


@dataclass(frozen=True)
class TaskConfig:
    task: Task
    template: PromptTemplate
    corpus: tuple[str, ...] = ()
    base_dir: Path = field(default_factory=Path.cwd)
    variant: PromptVariant = PromptVariant.DEFAULT
    output_dir: Path = Path("out")
    workers: int = DEFAULT_WORKERS
    strict: bool = False
    allow_partial: bool = False
    context_budget: int = DEFAULT_CONTEXT_BUDGET
    allowlist: Path | None = None
    backend: BackendConfig = field(default_factory=BackendConfig)
    adapter: AdapterSpec | None = None
    mutation: MutationConfig = field(default_factory=MutationConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    testgen: TestgenConfig = field(default_factory=TestgenConfig)

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.context_budget < 1:
            raise ConfigError(f"context_budget must be >= 1, got {self.context_budget}")
        if self.template.task is not self.task:
            raise ConfigError(f"prompt template is for {self.template.task}, not {self.task}")

    def with_variant(self, variant: PromptVariant) -> "TaskConfig":
        return replace(self, variant=variant)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def read_config_file(path: Path) -> dict[str, Any]:
    """Parse a TOML or JSON config file into plain Python values."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".json":
            data = json.loads(text)
        else:
            data = tomlkit.parse(text).unwrap()
    except ValueError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a table/object at the top level")
    return data


def _set_dotted(data: dict[str, Any], dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    target = data
    for name in parents:
        target = target.setdefault(name, {})
        if not isinstance(target, dict):
            raise ConfigError(f"config key {name!r} must be a table")
    target[leaf] = value


def _layer(data: dict[str, Any], values: Mapping[str, Any]) -> None:
    for dotted, value in values.items():
        if value is None:
            continue
        if dotted in _PATH_KEYS:
            value = str(Path(value).resolve())
        _set_dotted(data, dotted, value)


def env_overrides(environ: Mapping[str, str]) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    for name, dotted in ENV_OVERRIDES.items():
        value = environ.get(name, "").strip()
        if value:
            overrides[dotted] = value
    return overrides


def load_config(
    path: Path,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> TaskConfig:
    """Load *path* and layer environment and flag *overrides* on top.

    *overrides* uses dotted keys (``"backend.model"``); None values are
    ignored so unset flags never mask the file.
    """
    path = Path(path)
    data = read_config_file(path)
    _layer(data, env_overrides(os.environ if environ is None else environ))
    _layer(data, overrides or {})
    return config_from_mapping(data, path.resolve().parent)


def _table(data: Mapping[str, Any], name: str) -> dict[str, Any]:
    value = data.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be a table")
    return value


def _path(value: Any, base_dir: Path) -> Path | None:
    if value in (None, ""):
        return None
    return base_dir / Path(value)


def _int(value: Any, key: str) -> int:
    try:
        return int(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key} must be an integer, got {value!r}") from exc


def _bool(value: Any) -> bool:
    if isinstance(value, str):
        return value.strip().lower() in ("1", "true", "yes", "on")
    return bool(value)


def _choice(value: Any, choices: tuple[str, ...], key: str) -> str:
    if value not in choices:
        raise ConfigError(f"{key} must be one of {', '.join(choices)}, got {value!r}")
    return value


def build_template(task: Task, prompt: Mapping[str, Any], base_dir: Path) -> PromptTemplate:
    custom = _path(prompt.get("template"), base_dir)
    template = load_template(custom) if custom else load_bundled_template(task)
    bank = _path(prompt.get("example_bank"), base_dir)
    if bank is not None:
        examples, bad_examples = load_example_bank(bank)
        template = template.with_examples(examples, bad_examples)
    changes: dict[str, Any] = {}
    if prompt.get("temperature") is not None:
        changes["temperature"] = float(prompt["temperature"])
    if prompt.get("max_tokens") is not None:
        changes["max_tokens"] = _int(prompt["max_tokens"], "prompt.max_tokens")
    return replace(template, **changes) if changes else template


def build_adapter(adapter: Mapping[str, Any], base_dir: Path) -> AdapterSpec | None:
    if not adapter.get("compile_cmd"):
        if adapter:
            logger.warning("[adapter] has no compile_cmd; compile checks are disabled")
        return None
    test_template = adapter.get("test_class_template") or DEFAULT_TEST_TEMPLATE
    template_file = _path(adapter.get("test_class_template_file"), base_dir)
    if template_file is not None:
        try:
            test_template = template_file.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read test class template {template_file}: {exc}") from exc
    return AdapterSpec(
        compile_cmd=adapter["compile_cmd"],
        coverage_cmd=adapter.get("coverage_cmd") or None,
        extract_cmd=adapter.get("extract_cmd") or None,
        test_class_template=test_template,
        expression_template=adapter.get("expression_template") or None,
        timeout_s=_int(adapter.get("timeout_s", 60), "adapter.timeout_s"),
        source_suffix=adapter.get("source_suffix", ".java"),
        language=adapter.get("language", "java"),
    )


def build_schedule(raw: Mapping[str, Any]) -> TemperatureSchedule:
    defaults = TemperatureSchedule()
    return TemperatureSchedule(
        start=float(raw.get("start", defaults.start)),
        end=float(raw.get("end", defaults.end)),
        step=float(raw.get("step", defaults.step)),
        queries_per_temperature=_int(
            raw.get("queries_per_temperature", defaults.queries_per_temperature),
            "testgen.schedule.queries_per_temperature",
        ),
    )


def config_from_mapping(data: Mapping[str, Any], base_dir: Path) -> TaskConfig:
    try:
        task = Task(data["task"])
    except KeyError as exc:
        raise ConfigError("config needs a 'task' (mutation, oracle or testgen)") from exc
    except ValueError as exc:
        raise ConfigError(f"unknown task {data['task']!r} (mutation, oracle or testgen)") from exc

    corpus = data.get("corpus") or []
    if isinstance(corpus, str):
        corpus = [corpus]
    if not isinstance(corpus, list) or not all(isinstance(c, str) for c in corpus):
        raise ConfigError("corpus must be a list of glob patterns")

    try:
        variant = PromptVariant(data.get("variant", PromptVariant.DEFAULT.value))
    except ValueError as exc:
        choices = ", ".join(v.value for v in PromptVariant)
        raise ConfigError(f"unknown variant {data.get('variant')!r} ({choices})") from exc

    backend = _table(data, "backend")
    testgen = _table(data, "testgen")
    mutation = _table(data, "mutation")
    oracle = _table(data, "oracle")

    return TaskConfig(
        task=task,
        template=build_template(task, _table(data, "prompt"), base_dir),
        corpus=tuple(corpus),
        base_dir=base_dir,
        variant=variant,
        output_dir=_path(data.get("output_dir", "out"), base_dir) or base_dir / "out",
        workers=_int(data.get("workers", DEFAULT_WORKERS), "workers"),
        strict=_bool(data.get("strict", False)),
        allow_partial=_bool(data.get("allow_partial", False)),
        context_budget=_int(data.get("context_budget", DEFAULT_CONTEXT_BUDGET), "context_budget"),
        allowlist=_path(data.get("allowlist"), base_dir),
        backend=BackendConfig(
            kind=_choice(backend.get("kind", "scripted"), BACKEND_KINDS, "backend.kind"),
            model=str(backend.get("model", "scripted")),
            base_url=backend.get("base_url") or None,
            bank=_path(backend.get("bank"), base_dir),
            max_in_flight=_int(backend.get("max_in_flight", 10), "backend.max_in_flight"),
            timeout_s=float(backend.get("timeout_s", 60.0)),
            max_attempts=_int(backend.get("max_attempts", 5), "backend.max_attempts"),
        ),
        adapter=build_adapter(_table(data, "adapter"), base_dir),
        mutation=MutationConfig(baseline=_path(mutation.get("baseline"), base_dir)),
        oracle=OracleConfig(
            ground_truth=_path(oracle.get("ground_truth"), base_dir),
            symbols=_path(oracle.get("symbols"), base_dir),
            candidates=_path(oracle.get("candidates"), base_dir),
            baseline=_path(oracle.get("baseline"), base_dir),
        ),
        testgen=TestgenConfig(
            schedule=build_schedule(_table(testgen, "schedule")),
            example_selection=_choice(
                testgen.get("example_selection", "same-class"), EXAMPLE_SELECTIONS, "testgen.example_selection"
            ),
            coverage_map=_path(testgen.get("coverage_map"), base_dir),
            methods=_path(testgen.get("methods"), base_dir),
        ),
    )
