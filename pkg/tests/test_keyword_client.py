"""
Tests for the external keyword endpoint client
"""
import json

import httpx
import pytest

from prefsynth.core.errors import KeywordParseError, KeywordServiceError
from prefsynth.core.keyword_client import KeywordClient, parse_keyword_response


def _client(handler, **kwargs) -> KeywordClient:
    defaults = dict(
        url="http://keywords.test/extract",
        timeout=1.0,
        retry_attempts=3,
        backoff_seconds=0.0,
        max_inflight=2,
        batch_size=2,
        jitter=False,
    )
    defaults.update(kwargs)
    return KeywordClient(transport=httpx.MockTransport(handler), **defaults)


def _echo(request: httpx.Request) -> httpx.Response:
    texts = json.loads(request.content)["texts"]
    return httpx.Response(200, json={"keywords": [t.split() for t in texts]})


@pytest.mark.asyncio
async def test_batches_preserve_input_order():
    """Five texts in batches of two come back in request order."""
    seen: list[int] = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(len(json.loads(request.content)["texts"]))
        return _echo(request)

    texts = [f"word{i} Common" for i in range(5)]
    result = await _client(handler).extract(texts)
    assert result == [[f"word{i}", "common"] for i in range(5)]
    assert sorted(seen) == [1, 2, 2]


@pytest.mark.asyncio
async def test_empty_input_makes_no_request():
    def handler(request: httpx.Request) -> httpx.Response:
        raise AssertionError("no request expected")

    assert await _client(handler).extract([]) == []


@pytest.mark.asyncio
async def test_retries_server_errors_then_succeeds():
    calls = {"n": 0}

    def handler(request: httpx.Request) -> httpx.Response:
        calls["n"] += 1
        if calls["n"] < 3:
            return httpx.Response(503)
        return _echo(request)

    result = await _client(handler).extract(["sport shoe"])
    assert result == [["sport", "shoe"]]
    assert calls["n"] == 3


@pytest.mark.asyncio
async def test_gives_up_after_retry_budget():
    calls = {"n": 0}

    def handler(request: httpx.Request) -> httpx.Response:
        calls["n"] += 1
        return httpx.Response(429)

    with pytest.raises(KeywordServiceError) as exc:
        await _client(handler, retry_attempts=2).extract(["x"])
    assert calls["n"] == 2
    assert exc.value.attempts == 2


@pytest.mark.asyncio
async def test_client_errors_are_not_retried():
    calls = {"n": 0}

    def handler(request: httpx.Request) -> httpx.Response:
        calls["n"] += 1
        return httpx.Response(400, json={"detail": "bad"})

    with pytest.raises(KeywordServiceError):
        await _client(handler).extract(["x"])
    assert calls["n"] == 1


@pytest.mark.asyncio
async def test_transport_errors_are_retried():
    calls = {"n": 0}

    def handler(request: httpx.Request) -> httpx.Response:
        calls["n"] += 1
        if calls["n"] == 1:
            raise httpx.ConnectError("refused", request=request)
        return _echo(request)

    assert await _client(handler).extract(["ok"]) == [["ok"]]
    assert calls["n"] == 2


@pytest.mark.asyncio
async def test_invalid_json_is_parse_error():
    def handler(request: httpx.Request) -> httpx.Response:
        return httpx.Response(200, content=b"not json")

    with pytest.raises(KeywordParseError):
        await _client(handler).extract(["x"])


def test_extract_sync_wraps_async():
    assert _client(_echo).extract_sync(["a b"]) == [["a", "b"]]


def test_missing_url_is_service_error():
    with pytest.raises(KeywordServiceError):
        KeywordClient(url=None)


def test_parse_keyword_response_validation():
    assert parse_keyword_response({"keywords": [[" Hat ", ""]]}, expected=1) == [["hat"]]
    with pytest.raises(KeywordParseError):
        parse_keyword_response({"words": []}, expected=0)
    with pytest.raises(KeywordParseError):
        parse_keyword_response({"keywords": [["a"]]}, expected=2)
    with pytest.raises(KeywordParseError):
        parse_keyword_response({"keywords": [[1, 2]]}, expected=1)
