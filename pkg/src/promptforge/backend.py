"""Completion backends.

Two implementations share one interface (``complete(request)``):

- ``HttpBackend`` posts to ``<base_url>/completions`` of any server that
  speaks the plain completions API (``choices[0].text``).
- ``ScriptedBackend`` answers from a canned bank keyed by
  (instance id, variant, temperature, query index) and never touches the
  network.  It backs every offline test and fixture run.
"""

from collections.abc import Callable
from collections.abc import Iterable
from dataclasses import dataclass
from dataclasses import field
from enum import StrEnum
from pathlib import Path
from promptforge.errors import BackendUnavailable
from promptforge.errors import ConfigError
from promptforge.errors import InvalidRequest
from promptforge.errors import MalformedResponse
from promptforge.errors import MissingApiKey
from typing import Any
from typing import Protocol

import httpx
import json
import logging
import os
import threading
import time


logger = logging.getLogger(__name__)

API_KEY_ENV = "PROMPTFORGE_API_KEY"

MAX_STOP_SEQUENCES = 4
TOO_MANY_REQUESTS = 429


class FinishReason(StrEnum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"


@dataclass(frozen=True)
class RequestKey:
    instance_id: str
    variant: str
    temperature: float
    query_index: int = 0

    @property
    def normalized(self) -> tuple[str, str, float, int]:
        return (self.instance_id, self.variant, round(self.temperature, 2), self.query_index)


@dataclass(frozen=True)
class ModelRequest:
    model_id: str
    prompt: str
    temperature: float
    max_tokens: int
    stop: tuple[str, ...]
    n: int = 1
    key: RequestKey | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 1.0:
            raise InvalidRequest(f"temperature {self.temperature} outside [0, 1]")
        if self.max_tokens < 1:
            raise InvalidRequest("max_tokens must be >= 1")
        if not self.stop:
            raise InvalidRequest("at least one stop sequence is required")
        if len(self.stop) > MAX_STOP_SEQUENCES:
            raise InvalidRequest(f"at most {MAX_STOP_SEQUENCES} stop sequences are allowed")
        if self.n < 1:
            raise InvalidRequest("n must be >= 1")

    def payload(self) -> dict[str, Any]:
        return {
            "model": self.model_id,
            "prompt": self.prompt,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "stop": list(self.stop),
            "n": self.n,
        }


@dataclass(frozen=True)
class ModelResponse:
    text: str
    finish_reason: FinishReason
    latency_ms: int = 0


class ModelBackend(Protocol):
    def complete(self, request: ModelRequest) -> ModelResponse: ...


def strip_stop(text: str, stop: Iterable[str]) -> str:
    """Cut *text* at the earliest occurrence of any stop sequence."""
    cut = len(text)
    for seq in stop:
        if not seq:
            continue
        pos = text.find(seq)
        if pos != -1 and pos < cut:
            cut = pos
    return text[:cut]


# ---------------------------------------------------------------------------
# Scripted backend
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScriptedBank:
    entries: dict[tuple[str, str, float, int], str] = field(default_factory=dict)
    default: str | None = None

    @classmethod
    def from_entries(
        cls, rows: Iterable[dict[str, Any]], default: str | None = None
    ) -> "ScriptedBank":
        entries = {}
        for row in rows:
            key = RequestKey(
                instance_id=row["instance_id"],
                variant=row.get("variant", "default"),
                temperature=float(row.get("temperature", 0.0)),
                query_index=int(row.get("query_index", 0)),
            )
            entries[key.normalized] = row["completion"]
        return cls(entries=entries, default=default)


def load_scripted_bank(path: Path) -> ScriptedBank:
    """Load a bank file.

    The file is a JSON array of ``{instance_id, variant, temperature,
    query_index, completion}`` rows, or an object ``{"default": ...,
    "entries": [...]}`` when a fallback completion is wanted.
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read scripted bank {path}: {exc}") from exc
    if isinstance(data, list):
        return ScriptedBank.from_entries(data)
    if isinstance(data, dict):
        return ScriptedBank.from_entries(data.get("entries", []), default=data.get("default"))
    raise ConfigError(f"scripted bank {path} must be a JSON array or object")


def complete_scripted(bank: ScriptedBank, key: RequestKey) -> ModelResponse:
    text = bank.entries.get(key.normalized)
    if text is not None:
        return ModelResponse(text=text, finish_reason=FinishReason.STOP)
    if bank.default is not None:
        return ModelResponse(text=bank.default, finish_reason=FinishReason.STOP)
    return ModelResponse(text="", finish_reason=FinishReason.ERROR)


class ScriptedBackend:
    """Offline backend; lookups are pure, so it is safe across threads."""

    def __init__(self, bank: ScriptedBank) -> None:
        self.bank = bank
        self._lock = threading.Lock()
        self._calls = 0

    @property
    def calls(self) -> int:
        return self._calls

    def complete(self, request: ModelRequest) -> ModelResponse:
        with self._lock:
            self._calls += 1
        key = request.key or RequestKey(
            instance_id=request.prompt, variant="default", temperature=request.temperature
        )
        response = complete_scripted(self.bank, key)
        if response.finish_reason is FinishReason.STOP:
            return ModelResponse(
                text=strip_stop(response.text, request.stop),
                finish_reason=FinishReason.STOP,
            )
        return response


# ---------------------------------------------------------------------------
# HTTP backend
# ---------------------------------------------------------------------------


class HttpBackend:
    """Client for an OpenAI-compatible ``/completions`` endpoint.

    Transient failures (transport errors, HTTP 429 and 5xx) are retried
    with exponential backoff: retry *n* waits ``base_delay * factor ** (n - 1)``
    seconds, ``max_attempts`` attempts in total.  A semaphore caps
    the number of requests in flight across threads.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str,
        *,
        timeout_s: float = 60.0,
        max_attempts: int = 5,
        base_delay: float = 1.0,
        factor: float = 2.0,
        max_in_flight: int = 10,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.max_attempts = max_attempts
        self.base_delay = base_delay
        self.factor = factor
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._client = httpx.Client(
            timeout=timeout_s,
            transport=transport,
            headers={"Authorization": f"Bearer {api_key}"},
        )

    @classmethod
    def from_env(cls, base_url: str, **kwargs: Any) -> "HttpBackend":
        api_key = os.environ.get(API_KEY_ENV, "").strip()
        if not api_key:
            raise MissingApiKey(f"{API_KEY_ENV} is not set (required by the http backend)")
        return cls(base_url, api_key, **kwargs)

    def close(self) -> None:
        self._client.close()

    def complete(self, request: ModelRequest) -> ModelResponse:
        url = f"{self.base_url}/completions"
        last_error = "no attempt made"
        for attempt in range(self.max_attempts):
            if attempt:
                delay = self.base_delay * self.factor ** (attempt - 1)
                logger.warning(
                    "retrying %s in %.1fs (attempt %d/%d): %s",
                    url,
                    delay,
                    attempt + 1,
                    self.max_attempts,
                    last_error,
                )
                self._sleep(delay)
            started = time.monotonic()
            try:
                with self._slots:
                    response = self._client.post(url, json=request.payload())
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                continue
            if _is_transient(response.status_code):
                last_error = f"HTTP {response.status_code}"
                continue
            if response.status_code >= 400:
                raise BackendUnavailable(
                    f"{url} answered HTTP {response.status_code}: {response.text[:200]}"
                )
            latency_ms = int((time.monotonic() - started) * 1000)
            return _parse_completion(response, request, latency_ms)
        raise BackendUnavailable(f"{url} unavailable after {self.max_attempts} attempts: {last_error}")


def _is_transient(status_code: int) -> bool:
    return status_code == TOO_MANY_REQUESTS or status_code >= 500


def _parse_completion(
    response: httpx.Response, request: ModelRequest, latency_ms: int
) -> ModelResponse:
    try:
        data = response.json()
    except ValueError as exc:
        raise MalformedResponse(f"response is not JSON: {exc}") from exc
    try:
        choice = data["choices"][0]
        text = choice["text"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"response lacks choices[0].text: {exc!r}") from exc
    if not isinstance(text, str):
        raise MalformedResponse("choices[0].text is not a string")
    reason = choice.get("finish_reason") if isinstance(choice, dict) else None
    finish = FinishReason.LENGTH if reason == "length" else FinishReason.STOP
    if finish is FinishReason.STOP:
        text = strip_stop(text, request.stop)
    return ModelResponse(text=text, finish_reason=finish, latency_ms=latency_ms)
