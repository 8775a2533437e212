"""
PrefSynth - Keyword Endpoint Client

Optional HTTP client used when keyword extraction is delegated to an external
service. Wire format: POST ``{"texts": [...]}`` and expect
``{"keywords": [[...], ...]}`` with one list per text, in request order.
"""
import asyncio
import random
from typing import Any, Optional, Sequence

import httpx

from prefsynth.core.config import get_settings
from prefsynth.core.errors import KeywordParseError, KeywordServiceError
from prefsynth.core.logging import get_logger

logger = get_logger(__name__)


class KeywordClient:
    """Async client for an external keyword extraction endpoint.

    Requests are split into batches of ``batch_size`` texts and sent with at
    most ``max_inflight`` requests in flight. Each batch is retried with
    exponential backoff; results come back in input order regardless of
    completion order.
    """

    def __init__(
        self,
        url: Optional[str] = None,
        timeout: Optional[float] = None,
        retry_attempts: Optional[int] = None,
        backoff_seconds: Optional[float] = None,
        max_inflight: Optional[int] = None,
        batch_size: int = 8,
        transport: Optional[httpx.AsyncBaseTransport] = None,
        jitter: bool = True,
    ) -> None:
        settings = get_settings()
        self.url = url or settings.keyword_endpoint_url
        if not self.url:
            raise KeywordServiceError("keyword endpoint url is not configured", attempts=0)
        self.timeout = timeout if timeout is not None else settings.keyword_timeout_seconds
        self._retry_attempts = max(
            1,
            retry_attempts if retry_attempts is not None else settings.keyword_retry_attempts,
        )
        self._retry_backoff = (
            backoff_seconds
            if backoff_seconds is not None
            else settings.keyword_retry_backoff_seconds
        )
        self._max_inflight = max(
            1, max_inflight if max_inflight is not None else settings.keyword_max_inflight
        )
        self._batch_size = max(1, batch_size)
        self._transport = transport
        self._jitter = jitter

    def _wait_seconds(self, attempt: int, response: Optional[httpx.Response]) -> float:
        retry_after = response.headers.get("Retry-After") if response is not None else None
        if retry_after:
            try:
                wait = float(retry_after)
            except ValueError:
                wait = self._retry_backoff * (2 ** (attempt - 1))
        else:
            wait = self._retry_backoff * (2 ** (attempt - 1))
        if self._jitter:
            wait += random.uniform(0, self._retry_backoff)
        return wait

    async def _post_batch(
        self, client: httpx.AsyncClient, texts: Sequence[str]
    ) -> list[list[str]]:
        last_exc: Optional[BaseException] = None
        for attempt in range(1, self._retry_attempts + 1):
            response: Optional[httpx.Response] = None
            try:
                response = await client.post(self.url, json={"texts": list(texts)})
                if response.status_code >= 500 or response.status_code == 429:
                    raise httpx.HTTPStatusError(
                        f"server returned {response.status_code}",
                        request=response.request,
                        response=response,
                    )
                response.raise_for_status()
                return parse_keyword_response(response.json(), expected=len(texts))
            except KeywordParseError:
                raise
            except ValueError as exc:
                raise KeywordParseError(f"endpoint returned invalid JSON: {exc}") from exc
            except httpx.HTTPStatusError as exc:
                if exc.response.status_code < 500 and exc.response.status_code != 429:
                    raise KeywordServiceError(
                        f"keyword endpoint rejected request: {exc}", attempts=attempt
                    ) from exc
                last_exc = exc
            except httpx.HTTPError as exc:
                last_exc = exc

            if attempt == self._retry_attempts:
                break
            wait = self._wait_seconds(attempt, response)
            logger.warning(
                "keyword request failed, will retry",
                attempt=attempt,
                max_attempts=self._retry_attempts,
                wait_seconds=wait,
                error=str(last_exc),
            )
            await asyncio.sleep(wait)

        raise KeywordServiceError(
            f"keyword endpoint request failed: {last_exc}", attempts=self._retry_attempts
        ) from last_exc

    async def extract(self, texts: Sequence[str]) -> list[list[str]]:
        """Return one keyword list per input text, in input order."""
        if not texts:
            return []
        batches = [
            list(texts[i : i + self._batch_size])
            for i in range(0, len(texts), self._batch_size)
        ]
        semaphore = asyncio.Semaphore(self._max_inflight)

        async with httpx.AsyncClient(timeout=self.timeout, transport=self._transport) as client:

            async def run(batch: list[str]) -> list[list[str]]:
                async with semaphore:
                    return await self._post_batch(client, batch)

            results = await asyncio.gather(*(run(batch) for batch in batches))

        merged: list[list[str]] = []
        for batch_result in results:
            merged.extend(batch_result)
        logger.debug("keyword extraction complete", texts=len(texts), batches=len(batches))
        return merged

    def extract_sync(self, texts: Sequence[str]) -> list[list[str]]:
        """Blocking wrapper for callers outside an event loop."""
        return asyncio.run(self.extract(texts))


def parse_keyword_response(body: Any, expected: int) -> list[list[str]]:
    """Validate ``{"keywords": [[str, ...], ...]}`` with ``expected`` lists."""
    if not isinstance(body, dict) or "keywords" not in body:
        raise KeywordParseError("response body must be an object with a 'keywords' field")
    keywords = body["keywords"]
    if not isinstance(keywords, list) or len(keywords) != expected:
        raise KeywordParseError(
            f"'keywords' must be a list of {expected} lists, got "
            f"{type(keywords).__name__} of length {len(keywords) if isinstance(keywords, list) else 'n/a'}"
        )
    parsed: list[list[str]] = []
    for idx, entry in enumerate(keywords):
        if not isinstance(entry, list) or not all(isinstance(w, str) for w in entry):
            raise KeywordParseError(f"'keywords[{idx}]' must be a list of strings")
        parsed.append([w.strip().lower() for w in entry if w.strip()])
    return parsed
