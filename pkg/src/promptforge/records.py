"""Core records shared by every tool: instances, prompts and run records.

A run walks each extracted ``Instance`` through prompt assembly, model
calls and post-processing, and keeps everything it saw in a ``RunRecord``
so reports can be regenerated later from ``records.json`` alone.
"""

from collections.abc import Callable
from dataclasses import dataclass
from dataclasses import field
from enum import StrEnum
from typing import Any

import math


class Task(StrEnum):
    MUTATION = "mutation"
    ORACLE = "oracle"
    TESTGEN = "testgen"


class PromptVariant(StrEnum):
    DEFAULT = "default"
    NL_ONLY = "nl-only"
    EX_ONLY = "ex-only"
    BAD_EX = "bad-ex"


@dataclass(frozen=True)
class SourceUnit:
    path: str
    text: str
    language_tag: str = "java"


@dataclass(frozen=True)
class Instance:
    id: str
    task: Task
    payload: str
    context: dict[str, str] = field(default_factory=dict)
    path: str = ""
    offset: int = 0

    def __post_init__(self) -> None:
        if not self.payload:
            raise ValueError(f"instance {self.id} has an empty payload")

    @property
    def sort_key(self) -> tuple[str, int, str]:
        return (self.path, self.offset, self.id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "task": self.task.value,
            "payload": self.payload,
            "context": dict(sorted(self.context.items())),
            "path": self.path,
            "offset": self.offset,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Instance":
        return cls(
            id=data["id"],
            task=Task(data["task"]),
            payload=data["payload"],
            context=dict(data.get("context", {})),
            path=data.get("path", ""),
            offset=data.get("offset", 0),
        )


def approx_tokens(text: str) -> int:
    """Whitespace-separated units times 1.3, rounded up."""
    return math.ceil(len(text.split()) * 1.3)


@dataclass(frozen=True)
class PromptBundle:
    instance_id: str
    variant: PromptVariant
    text: str
    stop_sequences: tuple[str, ...]
    temperature: float
    max_tokens: int
    query_index: int = 0
    dropped_examples: int = 0

    def __post_init__(self) -> None:
        if not self.stop_sequences:
            raise ValueError("a prompt needs at least one stop sequence")
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    @property
    def token_estimate(self) -> int:
        return approx_tokens(self.text)

    def to_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "variant": self.variant.value,
            "text": self.text,
            "stop_sequences": list(self.stop_sequences),
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "query_index": self.query_index,
            "dropped_examples": self.dropped_examples,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PromptBundle":
        return cls(
            instance_id=data["instance_id"],
            variant=PromptVariant(data["variant"]),
            text=data["text"],
            stop_sequences=tuple(data["stop_sequences"]),
            temperature=data["temperature"],
            max_tokens=data["max_tokens"],
            query_index=data.get("query_index", 0),
            dropped_examples=data.get("dropped_examples", 0),
        )


# Artifact classes (Mutant, OracleSpec, TestCandidate) register themselves
# here so records.json can be decoded without this module importing them.
_ARTIFACT_TYPES: dict[str, type] = {}


def register_artifact(kind: str) -> Callable[[type], type]:
    def decorator(cls: type) -> type:
        cls.artifact_kind = kind  # type: ignore[attr-defined]
        _ARTIFACT_TYPES[kind] = cls
        return cls

    return decorator


@dataclass(frozen=True)
class GeneratedArtifact:
    """A parsed, validated output tied to the raw completion it came from."""

    completion_index: int
    value: Any

    def to_dict(self) -> dict[str, Any]:
        return {
            "completion_index": self.completion_index,
            "kind": self.value.artifact_kind,
            "value": self.value.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "GeneratedArtifact":
        artifact_type = _ARTIFACT_TYPES[data["kind"]]
        return cls(
            completion_index=data["completion_index"],
            value=artifact_type.from_dict(data["value"]),
        )


@dataclass(frozen=True)
class Discard:
    raw: str
    reason: str


@dataclass
class RunRecord:
    instance: Instance
    prompts: list[PromptBundle] = field(default_factory=list)
    raw_completions: list[str] = field(default_factory=list)
    artifacts: list[GeneratedArtifact] = field(default_factory=list)
    discards: list[Discard] = field(default_factory=list)
    incomplete: bool = False

    @property
    def completed(self) -> bool:
        return not self.incomplete and len(self.prompts) == len(self.raw_completions)

    def values(self) -> list[Any]:
        return [artifact.value for artifact in self.artifacts]

    def to_dict(self) -> dict[str, Any]:
        return {
            "instance": self.instance.to_dict(),
            "prompts": [p.to_dict() for p in self.prompts],
            "raw_completions": list(self.raw_completions),
            "artifacts": [a.to_dict() for a in self.artifacts],
            "discards": [{"raw": d.raw, "reason": d.reason} for d in self.discards],
            "incomplete": self.incomplete,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunRecord":
        return cls(
            instance=Instance.from_dict(data["instance"]),
            prompts=[PromptBundle.from_dict(p) for p in data.get("prompts", [])],
            raw_completions=list(data.get("raw_completions", [])),
            artifacts=[GeneratedArtifact.from_dict(a) for a in data.get("artifacts", [])],
            discards=[Discard(d["raw"], d["reason"]) for d in data.get("discards", [])],
            incomplete=data.get("incomplete", False),
        )
