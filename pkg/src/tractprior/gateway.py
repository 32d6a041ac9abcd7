"""Chat-completion backends with log-probabilities and record/replay.

Real backends speak the common ``/chat/completions`` JSON wire format. The
replay store is a JSON-lines file of ``{digest, response, checksum}`` entries,
so recorded sessions double as test fixtures.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx

from .prompts import Message, Role

log = logging.getLogger(__name__)


class GatewayError(RuntimeError):
    retryable = False


class TransportError(GatewayError):
    retryable = True


class RateLimitError(GatewayError):
    retryable = True

    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class BackendError(GatewayError):
    """Non-retryable rejection from the backend (bad request, auth)."""


class ReplayMissError(GatewayError):
    pass


class StoreCorruptionError(GatewayError):
    pass


class ConfigError(GatewayError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    model_id: str
    temperature: float = 0.0
    want_logprobs: bool = True
    max_output_tokens: int = 1024
    # distinguishes repeated draws of an otherwise identical request
    sample_index: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    def to_dict(self) -> dict:
        return {
            "messages": [m.to_dict() for m in self.messages],
            "model_id": self.model_id,
            "temperature": self.temperature,
            "want_logprobs": self.want_logprobs,
            "max_output_tokens": self.max_output_tokens,
            "sample_index": self.sample_index,
        }

    @property
    def digest(self) -> str:
        return sha256_text(canonical_json(self.to_dict()))


@dataclass(frozen=True)
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(self.input_tokens + other.input_tokens, self.output_tokens + other.output_tokens)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    token_logprobs: tuple[tuple[str, float], ...] | None = None
    backend_id: str = ""
    latency: float = 0.0
    usage: Usage = Usage()
    attempts: int = field(default=1, compare=False)

    def __post_init__(self):
        if self.token_logprobs is not None:
            lps = tuple((str(t), float(lp)) for t, lp in self.token_logprobs)
            if any(lp > 0 for _, lp in lps):
                raise ValueError("token log-probabilities must be <= 0")
            object.__setattr__(self, "token_logprobs", lps)

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "token_logprobs": None if self.token_logprobs is None else [list(x) for x in self.token_logprobs],
            "backend_id": self.backend_id,
            "latency": self.latency,
            "usage": {"input_tokens": self.usage.input_tokens, "output_tokens": self.usage.output_tokens},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChatResponse":
        lps = d.get("token_logprobs")
        u = d.get("usage") or {}
        return cls(
            text=d["text"],
            token_logprobs=None if lps is None else tuple((t, lp) for t, lp in lps),
            backend_id=d.get("backend_id", ""),
            latency=float(d.get("latency", 0.0)),
            usage=Usage(int(u.get("input_tokens", 0)), int(u.get("output_tokens", 0))),
        )


class Backend(Protocol):
    id: str

    def send(self, request: ChatRequest) -> ChatResponse: ...


class HttpBackend:
    """OpenAI-style chat-completion endpoint. The token comes from an env var."""

    def __init__(
        self,
        endpoint: str,
        api_key_env: str | None = "OPENAI_API_KEY",
        timeout: float = 60.0,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.id = f"http:{endpoint}"
        self._token = None
        if api_key_env:
            self._token = os.environ.get(api_key_env, "").strip()
            if not self._token:
                raise ConfigError(f"environment variable {api_key_env} is not set")
        self._client = client or httpx.Client(timeout=timeout)

    def _body(self, request: ChatRequest) -> dict:
        body = {
            "model": request.model_id,
            "messages": [m.to_dict() for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.want_logprobs:
            body["logprobs"] = True
        return body

    def send(self, request: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        if self._token:
            headers["Authorization"] = f"Bearer {self._token}"
        t0 = time.perf_counter()
        try:
            resp = self._client.post(self.endpoint, json=self._body(request), headers=headers)
        except httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        latency = time.perf_counter() - t0
        if resp.status_code == 429:
            ra = resp.headers.get("retry-after")
            raise RateLimitError("rate limited", float(ra) if ra else None)
        if resp.status_code >= 500:
            raise TransportError(f"server error {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"request rejected ({resp.status_code}): {resp.text[:200]}")
        return parse_wire_response(resp.json(), backend_id=self.id, latency=latency)


def parse_wire_response(payload: dict, backend_id: str = "", latency: float = 0.0) -> ChatResponse:
    try:
        choice = payload["choices"][0]
        text = choice["message"]["content"] or ""
    except (KeyError, IndexError, TypeError) as exc:
        raise BackendError(f"malformed completion payload: {exc}") from None
    lps = None
    lp_block = choice.get("logprobs")
    if lp_block and lp_block.get("content") is not None:
        lps = tuple((t["token"], min(0.0, float(t["logprob"]))) for t in lp_block["content"])
    u = payload.get("usage") or {}
    usage = Usage(int(u.get("prompt_tokens", 0)), int(u.get("completion_tokens", 0)))
    return ChatResponse(text, lps, backend_id, latency, usage)


class ReplayStore:
    """Append-only JSON-lines store mapping request digests to responses."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, ChatResponse] = {}
        if self.path.exists():
            self._load()

    @staticmethod
    def _checksum(digest: str, response: dict) -> str:
        return sha256_text(canonical_json({"digest": digest, "response": response}))

    def _load(self):
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                    digest, resp, checksum = entry["digest"], entry["response"], entry["checksum"]
                except (ValueError, KeyError) as exc:
                    raise StoreCorruptionError(f"{self.path}:{lineno}: unreadable entry ({exc})") from None
                if self._checksum(digest, resp) != checksum:
                    raise StoreCorruptionError(f"{self.path}:{lineno}: checksum mismatch")
                self._entries[digest] = ChatResponse.from_dict(resp)

    def __len__(self):
        return len(self._entries)

    def __contains__(self, digest: str) -> bool:
        return digest in self._entries

    def digests(self) -> set[str]:
        return set(self._entries)

    def get(self, digest: str) -> ChatResponse | None:
        return self._entries.get(digest)

    def append(self, digest: str, response: ChatResponse) -> None:
        resp = response.to_dict()
        line = canonical_json({"digest": digest, "response": resp, "checksum": self._checksum(digest, resp)})
        with self._lock:
            if digest in self._entries:
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
            self._entries[digest] = ChatResponse.from_dict(resp)


class ReplayBackend:
    def __init__(self, store: ReplayStore, strict: bool = True, fallback: Backend | None = None):
        self.store = store
        self.strict = strict
        self.fallback = fallback
        self.id = f"replay:{store.path.name}"

    def send(self, request: ChatRequest) -> ChatResponse:
        hit = self.store.get(request.digest)
        if hit is not None:
            return hit
        if self.strict or self.fallback is None:
            raise ReplayMissError(f"no recorded response for request {request.digest[:12]}")
        return self.fallback.send(request)


class RecordingBackend:
    def __init__(self, inner: Backend, store: ReplayStore):
        self.inner = inner
        self.store = store
        self.id = inner.id

    def send(self, request: ChatRequest) -> ChatResponse:
        resp = self.inner.send(request)
        self.store.append(request.digest, resp)
        return resp


def record_session(backend: Backend, store_path: str | Path) -> RecordingBackend:
    return RecordingBackend(backend, ReplayStore(store_path))


def replay_session(store_path: str | Path) -> ReplayBackend:
    path = Path(store_path)
    if not path.exists():
        raise ConfigError(f"replay store {path} does not exist")
    return ReplayBackend(ReplayStore(path))


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    backoff_base: float = 1.0
    sleep: Callable[[float], None] = field(default=time.sleep, compare=False, repr=False)

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    def delay(self, attempt: int, hint: float | None = None) -> float:
        d = self.backoff_base * (2 ** (attempt - 1))
        return max(d, hint or 0.0)


def complete(request: ChatRequest, backend: Backend, retry: RetryPolicy = RetryPolicy()) -> ChatResponse:
    """Send one request, retrying transport failures and rate limits."""
    for attempt in range(1, retry.max_attempts + 1):
        try:
            resp = backend.send(request)
        except GatewayError as exc:
            if not exc.retryable or attempt == retry.max_attempts:
                raise
            wait = retry.delay(attempt, getattr(exc, "retry_after", None))
            log.debug("attempt %d for %s failed (%s); retrying in %.2fs", attempt, request.digest[:12], exc, wait)
            retry.sleep(wait)
            continue
        return replace(resp, attempts=attempt)
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class ModelSettings:
    model_id: str
    temperature: float = 0.0
    want_logprobs: bool = True
    max_output_tokens: int = 1024

    def request(self, messages: Sequence[Message], sample_index: int = 0) -> ChatRequest:
        return ChatRequest(
            tuple(messages), self.model_id, self.temperature, self.want_logprobs, self.max_output_tokens, sample_index
        )


@dataclass(frozen=True)
class Conversation:
    """All requests and replies of one multi-turn session."""

    requests: tuple[ChatRequest, ...]
    responses: tuple[ChatResponse, ...]

    @property
    def final(self) -> ChatResponse:
        return self.responses[-1]

    @property
    def usage(self) -> Usage:
        total = Usage()
        for r in self.responses:
            total = total + r.usage
        return total

    @property
    def digest(self) -> str:
        return sha256_text("".join(r.digest for r in self.requests))


def converse(
    messages,
    backend: Backend,
    settings: ModelSettings,
    sample_index: int = 0,
    retry: RetryPolicy = RetryPolicy(),
) -> Conversation:
    """Play a sequence of user turns, keeping the history within one session."""
    history: list[Message] = []
    requests, responses = [], []
    for m in messages:
        history.append(m)
        if m.role is not Role.USER:
            continue
        req = settings.request(history, sample_index)
        resp = complete(req, backend, retry)
        requests.append(req)
        responses.append(resp)
        history.append(Message(Role.ASSISTANT, resp.text))
    return Conversation(tuple(requests), tuple(responses))
