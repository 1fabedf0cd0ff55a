"""Tests for the scripted and HTTP completion backends."""

from promptforge.backend import API_KEY_ENV
from promptforge.backend import complete_scripted
from promptforge.backend import FinishReason
from promptforge.backend import HttpBackend
from promptforge.backend import load_scripted_bank
from promptforge.backend import ModelRequest
from promptforge.backend import RequestKey
from promptforge.backend import ScriptedBackend
from promptforge.backend import ScriptedBank
from promptforge.backend import strip_stop
from promptforge.errors import BackendUnavailable
from promptforge.errors import ConfigError
from promptforge.errors import InvalidRequest
from promptforge.errors import MalformedResponse
from promptforge.errors import MissingApiKey

import httpx
import json
import pytest


def _request(**kwargs):
    values = {
        "model_id": "toy-model",
        "prompt": "[[Code]]\nx++;\n[[Mutations]]\n",
        "temperature": 0.2,
        "max_tokens": 64,
        "stop": ("[[Code]]",),
        "key": RequestKey("a/B.java:3", "default", 0.2, 0),
    }
    values.update(kwargs)
    return ModelRequest(**values)


class TestModelRequest:
    @pytest.mark.parametrize(
        "kwargs, message",
        [
            ({"temperature": 1.5}, "temperature"),
            ({"max_tokens": 0}, "max_tokens"),
            ({"stop": ()}, "stop sequence"),
            ({"stop": ("a", "b", "c", "d", "e")}, "at most 4"),
            ({"n": 0}, "n must be"),
        ],
    )
    def test_invalid_requests(self, kwargs, message):
        with pytest.raises(InvalidRequest, match=message):
            _request(**kwargs)

    def test_invalid_request_is_a_value_error(self):
        with pytest.raises(ValueError):
            _request(temperature=-1.0)

    def test_payload(self):
        payload = _request().payload()
        assert payload["model"] == "toy-model"
        assert payload["stop"] == ["[[Code]]"]
        assert payload["n"] == 1


class TestStripStop:
    def test_cuts_at_earliest_stop(self):
        assert strip_stop("a---b###c", ["###", "---"]) == "a"

    def test_no_stop_found(self):
        assert strip_stop("abc", ["---"]) == "abc"


class TestScriptedBackend:
    def test_answers_from_bank_and_strips_stop(self):
        bank = ScriptedBank.from_entries(
            [
                {
                    "instance_id": "a/B.java:3",
                    "variant": "default",
                    "temperature": 0.2,
                    "completion": "- ++ |==> --\n[[Code]]\nmore",
                }
            ]
        )
        backend = ScriptedBackend(bank)
        response = backend.complete(_request())
        assert response.text == "- ++ |==> --\n"
        assert response.finish_reason is FinishReason.STOP
        assert backend.calls == 1

    def test_temperature_is_compared_rounded(self):
        bank = ScriptedBank.from_entries([{"instance_id": "m", "temperature": 0.3, "completion": "ok"}])
        key = RequestKey("m", "default", 0.1 + 0.2, 0)
        assert ScriptedBackend(bank).complete(_request(key=key)).text == "ok"

    def test_unknown_key_is_an_error_response(self):
        response = ScriptedBackend(ScriptedBank()).complete(_request())
        assert response.finish_reason is FinishReason.ERROR
        assert response.text == ""

    def test_default_completion(self):
        bank = ScriptedBank(default="fallback")
        assert ScriptedBackend(bank).complete(_request()).text == "fallback"

    def test_query_index_is_part_of_the_key(self):
        bank = ScriptedBank.from_entries(
            [
                {"instance_id": "m", "query_index": 0, "completion": "first"},
                {"instance_id": "m", "query_index": 1, "completion": "second"},
            ]
        )
        backend = ScriptedBackend(bank)
        texts = [backend.complete(_request(temperature=0.0, key=RequestKey("m", "default", 0.0, q))).text for q in (0, 1)]
        assert texts == ["first", "second"]

    def test_variant_is_part_of_the_key(self):
        bank = ScriptedBank.from_entries([{"instance_id": "m", "variant": "nl-only", "completion": "plain"}])
        assert complete_scripted(bank, RequestKey("m", "nl-only", 0.0)).text == "plain"
        assert complete_scripted(bank, RequestKey("m", "default", 0.0)).finish_reason is FinishReason.ERROR


class TestLoadScriptedBank:
    def test_array_form(self, tmp_path):
        path = tmp_path / "bank.json"
        path.write_text(json.dumps([{"instance_id": "m", "completion": "x"}]))
        bank = load_scripted_bank(path)
        assert bank.entries == {("m", "default", 0.0, 0): "x"}
        assert bank.default is None

    def test_object_form(self, tmp_path):
        path = tmp_path / "bank.json"
        path.write_text(json.dumps({"default": "d", "entries": [{"instance_id": "m", "completion": "x"}]}))
        assert load_scripted_bank(path).default == "d"

    def test_bad_file(self, tmp_path):
        path = tmp_path / "bank.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="cannot read scripted bank"):
            load_scripted_bank(path)

    def test_wrong_shape(self, tmp_path):
        path = tmp_path / "bank.json"
        path.write_text('"text"')
        with pytest.raises(ConfigError, match="JSON array or object"):
            load_scripted_bank(path)


def _http_backend(handler, delays=None, **kwargs):
    sleep = (lambda d: delays.append(d)) if delays is not None else (lambda d: None)
    return HttpBackend(
        "https://models.example.test/v1/",
        "secret",
        transport=httpx.MockTransport(handler),
        sleep=sleep,
        **kwargs,
    )


class TestHttpBackend:
    def test_posts_completion_request(self):
        seen = {}

        def handler(request):
            seen["url"] = str(request.url)
            seen["auth"] = request.headers["Authorization"]
            seen["body"] = json.loads(request.content)
            return httpx.Response(200, json={"choices": [{"text": "- ++ |==> --", "finish_reason": "stop"}]})

        response = _http_backend(handler).complete(_request())
        assert response.text == "- ++ |==> --"
        assert response.finish_reason is FinishReason.STOP
        assert seen["url"] == "https://models.example.test/v1/completions"
        assert seen["auth"] == "Bearer secret"
        assert seen["body"]["temperature"] == 0.2
        assert seen["body"]["stop"] == ["[[Code]]"]

    def test_stop_is_stripped_when_server_ignores_it(self):
        def handler(request):
            return httpx.Response(200, json={"choices": [{"text": "- a |==> b\n[[Code]]\nz"}]})

        assert _http_backend(handler).complete(_request()).text == "- a |==> b\n"

    def test_length_finish_reason(self):
        def handler(request):
            return httpx.Response(200, json={"choices": [{"text": "- a |==", "finish_reason": "length"}]})

        assert _http_backend(handler).complete(_request()).finish_reason is FinishReason.LENGTH

    def test_retries_transient_failures_with_backoff(self):
        statuses = iter([429, 503, 200])
        delays = []

        def handler(request):
            status = next(statuses)
            if status != 200:
                return httpx.Response(status)
            return httpx.Response(200, json={"choices": [{"text": "ok"}]})

        response = _http_backend(handler, delays).complete(_request())
        assert response.text == "ok"
        assert delays == [1.0, 2.0]

    @pytest.mark.parametrize("status", [500, 501, 505, 599])
    def test_every_server_error_is_retried(self, status):
        statuses = iter([status, 200])
        delays = []

        def handler(request):
            code = next(statuses)
            if code != 200:
                return httpx.Response(code)
            return httpx.Response(200, json={"choices": [{"text": "ok"}]})

        assert _http_backend(handler, delays).complete(_request()).text == "ok"
        assert delays == [1.0]

    def test_retries_transport_errors_then_gives_up(self):
        calls = []

        def handler(request):
            calls.append(request)
            raise httpx.ConnectError("refused", request=request)

        with pytest.raises(BackendUnavailable, match="after 3 attempts"):
            _http_backend(handler, max_attempts=3).complete(_request())
        assert len(calls) == 3

    def test_client_error_is_not_retried(self):
        calls = []

        def handler(request):
            calls.append(request)
            return httpx.Response(400, text="bad prompt")

        with pytest.raises(BackendUnavailable, match="HTTP 400"):
            _http_backend(handler).complete(_request())
        assert len(calls) == 1

    @pytest.mark.parametrize(
        "response",
        [
            httpx.Response(200, text="not json"),
            httpx.Response(200, json={"choices": []}),
            httpx.Response(200, json={"choices": [{"text": 3}]}),
        ],
    )
    def test_malformed_responses(self, response):
        with pytest.raises(MalformedResponse):
            _http_backend(lambda request: response).complete(_request())

    def test_from_env_requires_api_key(self, monkeypatch):
        monkeypatch.delenv(API_KEY_ENV, raising=False)
        with pytest.raises(MissingApiKey, match=API_KEY_ENV):
            HttpBackend.from_env("https://models.example.test/v1")

    def test_from_env_reads_api_key(self, monkeypatch):
        monkeypatch.setenv(API_KEY_ENV, "from-env")
        backend = HttpBackend.from_env("https://models.example.test/v1")
        assert backend._client.headers["Authorization"] == "Bearer from-env"
        backend.close()
