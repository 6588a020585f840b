"""Uniform access to chat language models.

One live backend speaks the OpenAI-compatible ``/chat/completions`` wire
format; record and replay backends persist request/response pairs to a JSONL
cassette keyed by a canonical request hash; a scripted backend serves canned
responses for hermetic tests and demos. All backends expose a single
``complete(request) -> response`` method.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol

import requests
from filelock import FileLock

from .core import ConfigError, SecpatchError

logger = logging.getLogger(__name__)

RETRY_BASE_SECONDS = 1.0
RETRY_FACTOR = 2.0


class LlmError(SecpatchError):
    """Base class for model-call failures."""


class AuthError(LlmError):
    """The endpoint rejected our credentials (401/403)."""


class RateLimited(LlmError):
    """Still throttled (429) after exhausting retries."""


class RequestTimeout(LlmError):
    """No response within the configured timeout after retries."""


class HttpStatusError(LlmError):
    """A non-retryable HTTP error, or a 5xx that survived retries."""

    def __init__(self, status_code: int, detail: str = "") -> None:
        super().__init__(f"HTTP {status_code}: {detail}" if detail else f"HTTP {status_code}")
        self.status_code = status_code


class EmptyCompletion(LlmError):
    """The model returned empty text."""


class CassetteMiss(LlmError):
    """Replay backend has no entry for the request."""


class CorruptCassette(SecpatchError):
    """A cassette line could not be parsed."""


class ScriptExhausted(LlmError):
    """The scripted backend has no response left for the request."""


class BackendKind(str, Enum):
    LIVE = "live"
    RECORD = "record"
    REPLAY = "replay"
    SCRIPTED = "scripted"


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    user: str
    system: str = ""
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if not self.user:
            raise ValueError("ChatRequest.user must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be > 0")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class ProviderConfig:
    endpoint_url: str = ""
    api_key_env: str = ""
    timeout_seconds: int = 120
    max_retries: int = 3
    backend: BackendKind = BackendKind.LIVE
    cassette_path: str | None = None
    script_path: str | None = None
    requests_per_minute: int = 60

    def validate(self) -> None:
        if self.backend in (BackendKind.LIVE, BackendKind.RECORD) and not self.endpoint_url:
            raise ConfigError(f"{self.backend.value} backend requires endpoint_url")
        if self.backend in (BackendKind.RECORD, BackendKind.REPLAY) and not self.cassette_path:
            raise ConfigError(f"{self.backend.value} backend requires a cassette path")
        if self.backend is BackendKind.SCRIPTED and not self.script_path:
            raise ConfigError("scripted backend requires a script path")
        if self.timeout_seconds <= 0 or self.max_retries < 0 or self.requests_per_minute <= 0:
            raise ConfigError("timeout, retries and rate limit must be positive")


class LlmBackend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


# ---------------------------------------------------------------------------
# Canonical request hashing (cassette key)
# ---------------------------------------------------------------------------


def canonical_request_json(request: ChatRequest) -> str:
    """Canonical serialization: fixed key order, temperature at one decimal."""
    return json.dumps(
        {
            "model_id": request.model_id,
            "system": request.system,
            "user": request.user,
            "temperature": f"{request.temperature:.1f}",
            "max_tokens": request.max_tokens,
        },
        ensure_ascii=True,
        separators=(",", ":"),
    )


def canonical_request_hash(request: ChatRequest) -> str:
    return hashlib.sha256(canonical_request_json(request).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Rate limiting (process-wide token bucket per configured rate)
# ---------------------------------------------------------------------------


class TokenBucket:
    """Continuous-refill token bucket; ``acquire`` blocks until a token frees."""

    def __init__(
        self,
        rate_per_minute: int,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.rate_per_second = rate_per_minute / 60.0
        self.capacity = float(rate_per_minute)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate_per_second)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate_per_second
            self._sleep(wait)


_BUCKETS: dict[int, TokenBucket] = {}
_BUCKETS_LOCK = threading.Lock()


def _shared_bucket(rate_per_minute: int) -> TokenBucket:
    with _BUCKETS_LOCK:
        bucket = _BUCKETS.get(rate_per_minute)
        if bucket is None:
            bucket = TokenBucket(rate_per_minute)
            _BUCKETS[rate_per_minute] = bucket
        return bucket


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


@dataclass
class ScriptRule:
    """Serve queued responses to requests whose user message matches ``when``.

    ``when`` holds substrings that must all appear in the request's user
    message; an empty tuple matches everything. With ``repeat_last`` the final
    response keeps being served after the queue drains.
    """

    when: tuple[str, ...] = ()
    responses: deque[str] = field(default_factory=deque)
    repeat_last: bool = False
    _last: str | None = None

    def matches(self, request: ChatRequest) -> bool:
        return all(marker in request.user for marker in self.when)

    def pop(self) -> str | None:
        if self.responses:
            self._last = self.responses.popleft()
            return self._last
        if self.repeat_last and self._last is not None:
            return self._last
        return None


class ScriptedBackend:
    """Deterministic canned-response backend for hermetic runs.

    Rules are consulted in declaration order; the first matching rule with a
    response left serves the request. Per-task rule keys keep concurrent runs
    deterministic regardless of worker count.
    """

    def __init__(self, rules: Iterable[ScriptRule]) -> None:
        self._rules = list(rules)
        self._lock = threading.Lock()

    @classmethod
    def from_responses(cls, responses: Iterable[str]) -> "ScriptedBackend":
        return cls([ScriptRule(when=(), responses=deque(responses))])

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load script {path}: {exc}") from exc
        rules = []
        for entry in data.get("rules", []):
            when = entry.get("when", [])
            if isinstance(when, str):
                when = [when]
            rules.append(
                ScriptRule(
                    when=tuple(when),
                    responses=deque(entry.get("responses", [])),
                    repeat_last=bool(entry.get("repeat_last", False)),
                )
            )
        return cls(rules)

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            for rule in self._rules:
                if rule.matches(request):
                    text = rule.pop()
                    if text is not None:
                        return ChatResponse(text=text)
        raise ScriptExhausted(f"no scripted response for request: {request.user[:120]!r}")


def _load_cassette(path: str | Path) -> dict[str, dict[str, Any]]:
    """Load a cassette into a hash-keyed map; later duplicates win."""
    entries: dict[str, dict[str, Any]] = {}
    cassette = Path(path)
    if not cassette.exists():
        return entries
    with cassette.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                entries[entry["hash"]] = entry
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorruptCassette(f"{path}:{lineno}: malformed cassette line: {exc}") from exc
    return entries


def record(request: ChatRequest, response: ChatResponse, cassette_path: str | Path) -> None:
    """Append one request/response pair under an exclusive file lock."""
    path = Path(cassette_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entry = {
        "hash": canonical_request_hash(request),
        "request": {
            "model_id": request.model_id,
            "system": request.system,
            "user": request.user,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        },
        "response": {
            "text": response.text,
            "prompt_tokens": response.prompt_tokens,
            "completion_tokens": response.completion_tokens,
        },
    }
    with FileLock(str(path) + ".lock"):
        with path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(entry, ensure_ascii=False) + "\n")


def replay(request: ChatRequest, cassette_path: str | Path) -> ChatResponse:
    """Return the recorded response for this exact request."""
    digest = canonical_request_hash(request)
    entry = _load_cassette(cassette_path).get(digest)
    if entry is None:
        raise CassetteMiss(f"no cassette entry for request hash {digest}")
    resp = entry["response"]
    return ChatResponse(
        text=resp["text"],
        prompt_tokens=resp.get("prompt_tokens", 0),
        completion_tokens=resp.get("completion_tokens", 0),
    )


class ReplayBackend:
    def __init__(self, cassette_path: str | Path) -> None:
        self._path = cassette_path
        self._entries = _load_cassette(cassette_path)

    def complete(self, request: ChatRequest) -> ChatResponse:
        digest = canonical_request_hash(request)
        entry = self._entries.get(digest)
        if entry is None:
            raise CassetteMiss(f"no cassette entry for request hash {digest}")
        resp = entry["response"]
        return ChatResponse(
            text=resp["text"],
            prompt_tokens=resp.get("prompt_tokens", 0),
            completion_tokens=resp.get("completion_tokens", 0),
        )


class RecordingBackend:
    """Wrap any backend and append each exchange to the cassette."""

    def __init__(self, inner: LlmBackend, cassette_path: str | Path) -> None:
        self._inner = inner
        self._path = cassette_path

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self._inner.complete(request)
        record(request, response, self._path)
        return response


class LiveBackend:
    """OpenAI-compatible chat completions over HTTP.

    Transient failures (timeouts, connection errors, 429, 5xx) are retried
    with exponential backoff (base 1 s, factor 2) up to ``max_retries``;
    other 4xx responses are never retried.
    """

    def __init__(
        self,
        cfg: ProviderConfig,
        api_key: str | None = None,
        sleep: Callable[[float], None] = time.sleep,
        session: Any | None = None,
    ) -> None:
        if not cfg.endpoint_url:
            raise ConfigError("live backend requires endpoint_url")
        self._cfg = cfg
        self._url = cfg.endpoint_url.rstrip("/") + "/chat/completions"
        if api_key is None and cfg.api_key_env:
            import os

            api_key = os.environ.get(cfg.api_key_env)
            if not api_key:
                raise ConfigError(f"API key env var {cfg.api_key_env} is not set")
        self._api_key = api_key
        self._sleep = sleep
        self._session = session or requests
        self._bucket = _shared_bucket(cfg.requests_per_minute)

    def _payload(self, request: ChatRequest) -> dict[str, Any]:
        messages = []
        if request.system:
            messages.append({"role": "system", "content": request.system})
        messages.append({"role": "user", "content": request.user})
        return {
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }

    def complete(self, request: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        payload = self._payload(request)
        max_attempts = 1 + self._cfg.max_retries
        failure: LlmError | None = None
        for attempt in range(1, max_attempts + 1):
            self._bucket.acquire()
            try:
                http = self._session.post(
                    self._url, json=payload, headers=headers, timeout=self._cfg.timeout_seconds
                )
            except requests.Timeout:
                failure = RequestTimeout(f"timed out after {self._cfg.timeout_seconds}s")
            except requests.ConnectionError as exc:
                failure = RequestTimeout(f"connection failed: {exc}")
            else:
                status = http.status_code
                if status in (401, 403):
                    raise AuthError(f"endpoint rejected credentials (HTTP {status})")
                if status == 429:
                    failure = RateLimited("rate limited (HTTP 429)")
                elif status >= 500:
                    failure = HttpStatusError(status, "server error")
                elif status >= 400:
                    raise HttpStatusError(status, http.text[:200])
                else:
                    return self._parse(http)
            if attempt < max_attempts:
                delay = RETRY_BASE_SECONDS * (RETRY_FACTOR ** (attempt - 1))
                logger.warning("LLM request failed (%s); retry %d/%d in %.1fs",
                               failure, attempt, self._cfg.max_retries, delay)
                self._sleep(delay)
        assert failure is not None
        raise failure

    @staticmethod
    def _parse(http: Any) -> ChatResponse:
        try:
            body = http.json()
            choice = body["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise HttpStatusError(http.status_code, f"malformed completion body: {exc}") from exc
        if text is None:
            text = ""
        usage = body.get("usage") or {}
        return ChatResponse(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens") or 0),
            completion_tokens=int(usage.get("completion_tokens") or 0),
        )


def build_backend(cfg: ProviderConfig) -> LlmBackend:
    cfg.validate()
    if cfg.backend is BackendKind.SCRIPTED:
        return ScriptedBackend.from_file(cfg.script_path or "")
    if cfg.backend is BackendKind.REPLAY:
        return ReplayBackend(cfg.cassette_path or "")
    if cfg.backend is BackendKind.RECORD:
        return RecordingBackend(LiveBackend(cfg), cfg.cassette_path or "")
    return LiveBackend(cfg)


def complete(request: ChatRequest, cfg: ProviderConfig) -> ChatResponse:
    """One-shot completion through whatever backend the config selects."""
    response = build_backend(cfg).complete(request)
    if not response.text.strip():
        raise EmptyCompletion("model returned empty text")
    return response


class CountingBackend:
    """Wrap a backend and count the calls that reach it (attempted included)."""

    def __init__(self, inner: LlmBackend) -> None:
        self._inner = inner
        self._lock = threading.Lock()
        self.calls = 0

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls += 1
        return self._inner.complete(request)


@dataclass
class LlmClient:
    """A backend bound to one model plus the sampling defaults for a run."""

    backend: LlmBackend
    model_id: str
    temperature: float = 0.0
    max_tokens: int = 1024
    system: str = ""

    def request(self, user: str) -> ChatRequest:
        return ChatRequest(
            model_id=self.model_id,
            user=user,
            system=self.system,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
        )

    def ask(self, user: str) -> str:
        response = self.backend.complete(self.request(user))
        if not response.text.strip():
            raise EmptyCompletion("model returned empty text")
        return response.text
