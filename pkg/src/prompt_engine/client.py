"""Typed client for OpenAI-compatible chat, embedding, and rerank endpoints.

All generation traffic in the engine flows through chat_complete or the
bounded dispatcher. Credentials are resolved from an environment variable
named on the endpoint, never from CLI text.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, NamedTuple, Sequence

import httpx

logger = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "PROMPT_ENGINE_API_KEY"

ROLES = ("system", "user", "assistant")

# One shared connection pool; httpx.Client is thread-safe and building a
# fresh SSL context per request costs more than the request itself.
_HTTP_LOCK = threading.Lock()
_HTTP: httpx.Client | None = None


def _http() -> httpx.Client:
    global _HTTP
    with _HTTP_LOCK:
        if _HTTP is None:
            _HTTP = httpx.Client(limits=httpx.Limits(max_connections=256))
        return _HTTP


class ClientError(Exception):
    """Base class for all client-side failures."""


class TransportError(ClientError):
    """Network-level failure after exhausting retries."""


class StatusError(ClientError):
    """Non-success HTTP status, either non-retryable or retries exhausted."""

    def __init__(self, message: str, status: int, attempts: int, body: str = ""):
        super().__init__(message)
        self.status = status
        self.attempts = attempts
        self.body = body


class ResponseParseError(ClientError):
    """The backend returned 200 but the body did not match the schema."""


class LogprobsUnavailableError(ClientError):
    """The backend does not expose per-token log-probabilities."""


class Message(NamedTuple):
    role: str
    content: str


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be >= 0")

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int = 2048
    seed: int | None = None
    logprobs: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "messages", tuple(Message(role, content) for role, content in self.messages)
        )
        if not self.messages:
            raise ValueError("messages must be non-empty")
        for m in self.messages:
            if m.role not in ROLES:
                raise ValueError(f"unknown message role {m.role!r}")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("first message role must be system or user")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    def to_payload(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        if self.seed is not None:
            payload["seed"] = self.seed
        if self.logprobs:
            payload["logprobs"] = True
        return payload


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: TokenUsage
    finish_reason: str = ""
    logprobs: Any = None
    usage_estimated: bool = False
    attempts: int = 1


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff: float = 0.5
    backoff_multiplier: float = 2.0
    retryable_statuses: frozenset[int] = frozenset({408, 429, 500, 502, 503, 504})

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.backoff_multiplier <= 1:
            raise ValueError("backoff_multiplier must be > 1")

    def delay(self, attempt: int) -> float:
        """Backoff before retry number ``attempt`` (1-based, geometric)."""
        return self.base_backoff * self.backoff_multiplier ** (attempt - 1)


@dataclass(frozen=True)
class Endpoint:
    """One backend role: base URL, default model, and credential reference."""

    base_url: str
    model: str = ""
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout: float = 120.0

    def headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def url(self, path: str) -> str:
        return self.base_url.rstrip("/") + path


def approx_token_count(text: str) -> int:
    """Whitespace-token fallback used when a backend omits usage."""
    return len(text.split())


def _request_json(
    endpoint: Endpoint, path: str, payload: dict[str, Any], policy: RetryPolicy
) -> tuple[dict[str, Any], int]:
    """POST with retry on retryable statuses and transport failures.

    Returns the parsed body and the number of attempts actually made.
    """
    url = endpoint.url(path)
    last_exc: Exception | None = None
    last_status: int | None = None
    last_body = ""
    for attempt in range(1, policy.max_attempts + 1):
        try:
            resp = _http().post(
                url, json=payload, headers=endpoint.headers(), timeout=endpoint.timeout
            )
        except httpx.HTTPError as e:
            last_exc = e
            logger.debug("attempt %d/%d transport error: %s", attempt, policy.max_attempts, e)
            if attempt < policy.max_attempts:
                _sleep(policy.delay(attempt))
                continue
            raise TransportError(
                f"{url}: transport failure after {attempt} attempts: {e}"
            ) from e
        if resp.status_code == 200:
            try:
                return resp.json(), attempt
            except ValueError as e:
                raise ResponseParseError(f"{url}: response body is not JSON: {e}") from e
        last_status = resp.status_code
        last_body = resp.text[:500]
        if resp.status_code in policy.retryable_statuses and attempt < policy.max_attempts:
            logger.debug("attempt %d/%d got status %d, retrying", attempt, policy.max_attempts, resp.status_code)
            _sleep(policy.delay(attempt))
            continue
        if resp.status_code in policy.retryable_statuses:
            raise StatusError(
                f"{url}: status {resp.status_code} after {attempt} attempts",
                status=resp.status_code,
                attempts=attempt,
                body=last_body,
            )
        raise StatusError(
            f"{url}: non-retryable status {resp.status_code}",
            status=resp.status_code,
            attempts=attempt,
            body=last_body,
        )
    # unreachable: the loop always returns or raises
    raise TransportError(f"{url}: no attempts made ({last_exc}, {last_status})")


def _sleep(seconds: float) -> None:
    if seconds > 0:
        time.sleep(seconds)


def chat_complete(
    endpoint: Endpoint, req: ChatRequest, policy: RetryPolicy = RetryPolicy()
) -> ChatResponse:
    """Send one chat completion and return parsed text plus usage.

    When the backend omits the usage block, a whitespace-token
    approximation is substituted and the response is flagged
    usage_estimated so cost accounting never silently reads zeros.
    """
    payload = req.to_payload()
    if not payload["model"]:
        payload["model"] = endpoint.model
    body, attempts = _request_json(endpoint, "/chat/completions", payload, policy)
    try:
        choice = body["choices"][0]
        text = choice["message"]["content"] or ""
        finish = choice.get("finish_reason") or ""
        logprobs = choice.get("logprobs")
    except (KeyError, IndexError, TypeError) as e:
        raise ResponseParseError(f"malformed chat completion body: {e}: {body!r:.300}") from e
    usage_block = body.get("usage")
    if isinstance(usage_block, dict) and "prompt_tokens" in usage_block:
        usage = TokenUsage(
            prompt_tokens=int(usage_block.get("prompt_tokens", 0)),
            completion_tokens=int(usage_block.get("completion_tokens", 0)),
        )
        estimated = False
    else:
        usage = TokenUsage(
            prompt_tokens=sum(approx_token_count(m.content) for m in req.messages),
            completion_tokens=approx_token_count(text),
        )
        estimated = True
    return ChatResponse(
        text=text,
        usage=usage,
        finish_reason=finish,
        logprobs=logprobs,
        usage_estimated=estimated,
        attempts=attempts,
    )


def embed(
    endpoint: Endpoint,
    model: str,
    texts: Sequence[str],
    policy: RetryPolicy = RetryPolicy(),
) -> list[list[float]]:
    """Embed a batch of texts, order-aligned, uniform dimensionality."""
    if not texts:
        raise ValueError("texts must be non-empty")
    for i, t in enumerate(texts):
        if not t.strip():
            raise ValueError(f"text {i} is empty")
    payload = {"model": model or endpoint.model, "input": list(texts)}
    body, _ = _request_json(endpoint, "/embeddings", payload, policy)
    try:
        data = sorted(body["data"], key=lambda d: d["index"])
        vectors = [[float(x) for x in d["embedding"]] for d in data]
    except (KeyError, TypeError, ValueError) as e:
        raise ResponseParseError(f"malformed embeddings body: {e}") from e
    if len(vectors) != len(texts):
        raise ResponseParseError(
            f"expected {len(texts)} embeddings, got {len(vectors)}"
        )
    dims = {len(v) for v in vectors}
    if len(dims) != 1:
        raise ClientError(f"dimension mismatch across batch: {sorted(dims)}")
    return vectors


def dispatch_bounded(
    endpoint: Endpoint,
    requests: Sequence[ChatRequest],
    limit: int,
    policy: RetryPolicy = RetryPolicy(),
) -> list[ChatResponse | Exception]:
    """Run requests with at most ``limit`` in flight at any instant.

    Results are aligned to request order regardless of completion order.
    A failed slot holds its exception; siblings are never aborted.
    """
    if limit < 1:
        raise ValueError("limit must be >= 1")
    if not requests:
        return []
    results: list[ChatResponse | Exception] = [None] * len(requests)  # type: ignore[list-item]

    def _one(i: int, req: ChatRequest) -> None:
        try:
            results[i] = chat_complete(endpoint, req, policy)
        except Exception as e:  # per-slot isolation
            results[i] = e

    with ThreadPoolExecutor(max_workers=limit) as pool:
        futures = [pool.submit(_one, i, r) for i, r in enumerate(requests)]
        for f in futures:
            f.result()
    return results


def rerank_scores(
    endpoint: Endpoint,
    model: str,
    query: str,
    documents: Sequence[str],
    policy: RetryPolicy = RetryPolicy(),
) -> list[float]:
    """Score (query, document) pairs via a cross-encoder rerank endpoint.

    Wire format follows the common /rerank JSON convention:
    {"model", "query", "documents"} in, {"results": [{"index",
    "relevance_score"}]} out.
    """
    if not documents:
        raise ValueError("documents must be non-empty")
    payload = {"model": model or endpoint.model, "query": query, "documents": list(documents)}
    body, _ = _request_json(endpoint, "/rerank", payload, policy)
    try:
        results = sorted(body["results"], key=lambda d: d["index"])
        scores = [float(d["relevance_score"]) for d in results]
    except (KeyError, TypeError, ValueError) as e:
        raise ResponseParseError(f"malformed rerank body: {e}") from e
    if len(scores) != len(documents):
        raise ResponseParseError(f"expected {len(documents)} scores, got {len(scores)}")
    return scores


@dataclass(frozen=True)
class CompletionLogprobs:
    tokens: tuple[str, ...]
    token_logprobs: tuple[float | None, ...]
    text_offsets: tuple[int, ...]


def completion_logprobs(
    endpoint: Endpoint,
    model: str,
    prompt: str,
    policy: RetryPolicy = RetryPolicy(),
) -> CompletionLogprobs:
    """Fetch per-token log-probabilities of ``prompt`` via echo scoring.

    Uses the completions endpoint with echo=true and max_tokens=0, the
    standard way to score a fixed continuation. Raises
    LogprobsUnavailableError when the backend returns no logprobs block.
    """
    payload = {
        "model": model or endpoint.model,
        "prompt": prompt,
        "max_tokens": 0,
        "echo": True,
        "logprobs": 0,
    }
    body, _ = _request_json(endpoint, "/completions", payload, policy)
    try:
        choice = body["choices"][0]
    except (KeyError, IndexError, TypeError) as e:
        raise ResponseParseError(f"malformed completions body: {e}") from e
    lp = choice.get("logprobs")
    if not lp:
        raise LogprobsUnavailableError(
            f"{endpoint.base_url}: backend returned no logprobs; log-likelihood mode unsupported"
        )
    try:
        return CompletionLogprobs(
            tokens=tuple(lp["tokens"]),
            token_logprobs=tuple(
                None if x is None else float(x) for x in lp["token_logprobs"]
            ),
            text_offsets=tuple(int(x) for x in lp["text_offset"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ResponseParseError(f"malformed logprobs block: {e}") from e
