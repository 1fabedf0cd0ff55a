"""The three-step flow shared by every tool.

1. Instance extraction: the tool cuts the corpus into instances.
2. Prompting: each instance gets one or more prompts; the backend answers.
3. Post-processing: the tool parses and validates every completion.

Instances run on a bounded thread pool.  Backend calls are the only
concurrent effects; every record is built by exactly one worker and the
result is sorted by (path, offset, id), so the output never depends on
scheduling.
"""

from collections.abc import Iterable
from collections.abc import Mapping
from concurrent.futures import as_completed
from concurrent.futures import Future
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from promptforge.backend import FinishReason
from promptforge.backend import HttpBackend
from promptforge.backend import load_scripted_bank
from promptforge.backend import ModelBackend
from promptforge.backend import ModelRequest
from promptforge.backend import RequestKey
from promptforge.backend import ScriptedBackend
from promptforge.config import BackendConfig
from promptforge.config import TaskConfig
from promptforge.errors import BackendError
from promptforge.errors import ConfigError
from promptforge.errors import ContextBudgetExceeded
from promptforge.errors import InvalidCorpus
from promptforge.errors import IOFailure
from promptforge.errors import MissingContextKey
from promptforge.errors import PromptforgeError
from promptforge.lang_adapter import load_corpus
from promptforge.mutation import MutationTool
from promptforge.oracles import OracleTool
from promptforge.prompts import PromptTemplate
from promptforge.records import Discard
from promptforge.records import GeneratedArtifact
from promptforge.records import Instance
from promptforge.records import PromptBundle
from promptforge.records import PromptVariant
from promptforge.records import RunRecord
from promptforge.records import SourceUnit
from promptforge.records import Task
from promptforge.testgen import TestgenTool
from typing import Any
from typing import Protocol

import json
import logging


logger = logging.getLogger(__name__)

RECORDS_FILE = "records.json"


class Tool(Protocol):
    task: Task

    def extract(self, units: Iterable[SourceUnit]) -> tuple[list[Instance], list[tuple[SourceUnit, str]]]: ...

    def prompts(self, instance: Instance, variant: PromptVariant) -> list[PromptBundle]: ...

    def postprocess(self, instance: Instance, bundle: PromptBundle, raw: str) -> tuple[list[Any], list[Discard]]: ...

    def complete_record(self, record: RunRecord) -> None: ...


TOOLS: dict[Task, type] = {
    Task.MUTATION: MutationTool,
    Task.ORACLE: OracleTool,
    Task.TESTGEN: TestgenTool,
}


def build_tool(config: TaskConfig, template: PromptTemplate | None = None) -> Tool:
    try:
        tool_class = TOOLS[config.task]
    except KeyError as exc:
        raise ConfigError(f"no tool registered for task {config.task!r}") from exc
    return tool_class(config, template or config.template)


def build_backend(config: BackendConfig) -> ModelBackend:
    if config.kind == "scripted":
        if config.bank is None:
            raise ConfigError("the scripted backend needs [backend] bank")
        return ScriptedBackend(load_scripted_bank(config.bank))
    if config.kind == "http":
        if not config.base_url:
            raise ConfigError("the http backend needs [backend] base_url")
        return HttpBackend.from_env(
            config.base_url,
            timeout_s=config.timeout_s,
            max_attempts=config.max_attempts,
            max_in_flight=config.max_in_flight,
        )
    raise ConfigError(f"unknown backend kind {config.kind!r}")


def load_task_corpus(config: TaskConfig) -> list[SourceUnit]:
    language = config.adapter.language if config.adapter else "java"
    return load_corpus(config.corpus, config.base_dir, language)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def extraction_failure_record(unit: SourceUnit, task: Task, reason: str) -> RunRecord:
    instance = Instance(id=f"{unit.path}#extraction", task=task, payload=unit.path, path=unit.path)
    return RunRecord(instance=instance, discards=[Discard("", f"extraction failed: {reason}")])


def _request(config: TaskConfig, instance: Instance, bundle: PromptBundle) -> ModelRequest:
    return ModelRequest(
        model_id=config.backend.model,
        prompt=bundle.text,
        temperature=bundle.temperature,
        max_tokens=bundle.max_tokens,
        stop=bundle.stop_sequences,
        key=RequestKey(
            instance_id=instance.id,
            variant=bundle.variant.value,
            temperature=bundle.temperature,
            query_index=bundle.query_index,
        ),
    )


def process_instance(
    tool: Tool, config: TaskConfig, backend: ModelBackend, instance: Instance
) -> tuple[RunRecord, BackendError | None]:
    """Prompt, query and post-process one instance.

    A backend failure stops this instance only; the record is flagged
    incomplete and the error handed back so a strict run can abort.
    """
    record = RunRecord(instance=instance)
    try:
        bundles = tool.prompts(instance, config.variant)
    except (MissingContextKey, ContextBudgetExceeded) as exc:
        record.discards.append(Discard("", f"prompt not built: {exc}"))
        return record, None

    dropped = max((bundle.dropped_examples for bundle in bundles), default=0)
    if dropped:
        record.discards.append(Discard("", f"context budget: dropped {dropped} example(s)"))

    failure: BackendError | None = None
    record.prompts = list(bundles)
    for bundle in bundles:
        try:
            response = backend.complete(_request(config, instance, bundle))
        except BackendError as exc:
            logger.warning("%s: %s", instance.id, exc)
            record.incomplete = True
            record.discards.append(Discard("", f"backend failure: {exc}"))
            failure = exc
            break
        index = len(record.raw_completions)
        record.raw_completions.append(response.text)
        if response.finish_reason is FinishReason.ERROR:
            record.discards.append(Discard(response.text, "backend error"))
            continue
        values, discards = tool.postprocess(instance, bundle, response.text)
        record.artifacts.extend(GeneratedArtifact(index, value) for value in values)
        record.discards.extend(discards)

    tool.complete_record(record)
    return record, failure


def sort_records(records: Iterable[RunRecord]) -> list[RunRecord]:
    return sorted(records, key=lambda r: r.instance.sort_key)


def _abort(exc: PromptforgeError, records: Iterable[RunRecord]) -> PromptforgeError:
    exc.records = sort_records(records)
    return exc


def run_pipeline(
    task_config: TaskConfig,
    corpus: list[SourceUnit],
    backend: ModelBackend,
    *,
    tool: Tool | None = None,
) -> list[RunRecord]:
    """One RunRecord per extracted instance, plus one per extraction failure.

    ``BackendError`` aborts only under ``strict``; ``AdapterFailure``
    always aborts.  Either way the raised error carries the partial
    records, with unfinished instances flagged incomplete.
    """
    if not corpus:
        raise InvalidCorpus("the corpus is empty (check the corpus globs)")
    tool = tool or build_tool(task_config)
    instances, failures = tool.extract(corpus)

    seen: set[str] = set()
    for instance in instances:
        if instance.id in seen:
            raise InvalidCorpus(f"duplicate instance id {instance.id!r}")
        seen.add(instance.id)

    records = [extraction_failure_record(unit, tool.task, reason) for unit, reason in failures]
    logger.info("%s: %d instance(s), %d extraction failure(s)", tool.task, len(instances), len(failures))

    done: dict[str, RunRecord] = {}

    def partial() -> list[RunRecord]:
        pending = [RunRecord(instance=i, incomplete=True) for i in instances if i.id not in done]
        return records + list(done.values()) + pending

    with ThreadPoolExecutor(max_workers=task_config.workers) as executor:
        futures: dict[Future, Instance] = {
            executor.submit(process_instance, tool, task_config, backend, instance): instance
            for instance in instances
        }
        for future in as_completed(futures):
            try:
                record, failure = future.result()
            except PromptforgeError as exc:
                executor.shutdown(wait=True, cancel_futures=True)
                _collect_finished(futures, done)
                raise _abort(exc, partial()) from None
            done[record.instance.id] = record
            if failure is not None and task_config.strict:
                executor.shutdown(wait=True, cancel_futures=True)
                _collect_finished(futures, done)
                raise _abort(failure, partial()) from None

    return sort_records(records + list(done.values()))


def _collect_finished(futures: Mapping[Future, Instance], done: dict[str, RunRecord]) -> None:
    for future in futures:
        if future.done() and not future.cancelled() and future.exception() is None:
            record, _ = future.result()
            done.setdefault(record.instance.id, record)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def records_to_json(records: Iterable[RunRecord], *, task: Task, model: str, variant: PromptVariant) -> str:
    data = {
        "task": task.value,
        "model": model,
        "variant": variant.value,
        "records": [record.to_dict() for record in sort_records(records)],
    }
    return json.dumps(data, indent=2, ensure_ascii=False) + "\n"


def save_records(
    records: Iterable[RunRecord], out_dir: Path, *, task: Task, model: str, variant: PromptVariant
) -> Path:
    path = Path(out_dir) / RECORDS_FILE
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(records_to_json(records, task=task, model=model, variant=variant), encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return path


class StoredRun:
    """A ``records.json`` read back from a run directory."""

    def __init__(self, task: Task, model: str, variant: PromptVariant, records: list[RunRecord]) -> None:
        self.task = task
        self.model = model
        self.variant = variant
        self.records = records

    @property
    def incomplete(self) -> int:
        return sum(1 for record in self.records if record.incomplete)


def load_records(run_dir: Path) -> StoredRun:
    path = Path(run_dir) / RECORDS_FILE
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    try:
        return StoredRun(
            task=Task(data["task"]),
            model=data.get("model", ""),
            variant=PromptVariant(data.get("variant", PromptVariant.DEFAULT.value)),
            records=[RunRecord.from_dict(r) for r in data["records"]],
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path} is not a records file: {exc}") from exc
