"""Multi-turn conversations over interchangeable chat backends.

Two backends share one interface: an HTTP chat-completion endpoint and a
deterministic scripted mock. The mock resolves responses by a hash of the
ordered prompts delivered so far, so a replay validates conversation
structure (prompt order and retention mode), not just individual answers.
A recording wrapper captures live traffic into the same script format.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import requests


class BackendError(Exception):
    """Non-retryable backend failure."""


class BackendUnavailable(BackendError):
    """Backend cannot be used at all (missing credential, missing script)."""


class TransientBackendError(BackendError):
    """Failure worth retrying (connection drop, throttling, 5xx)."""


class BackendTimeout(TransientBackendError):
    """Request timed out."""


class MalformedBackendReply(BackendError):
    """Backend reply does not fit the expected shape (or is unscripted)."""


class RetriesExhausted(BackendError):
    """All retry attempts failed; carries the last underlying error."""


@dataclass(frozen=True)
class BackendParams:
    """Decoding parameters frozen for a conversation's lifetime."""

    model_name: str = "gpt-4-0314"
    temperature: float = 0.0
    top_p: float = 1.0
    frequency_penalty: float = 0.0
    presence_penalty: float = 0.0
    system_prompt: str | None = None


@dataclass(frozen=True)
class Turn:
    role: str  # "prompt" | "response"
    text: str
    timestamp: float

    def to_record(self) -> dict:
        return {"role": self.role, "text": self.text, "timestamp": self.timestamp}


def context_key(prompts: Sequence[str]) -> str:
    """Hash of the ordered prompts delivered in one backend call.

    Each prompt is whitespace-normalized so cosmetic reflows do not break a
    script; the order and count of prompts stay significant.
    """
    normalized = "\x1e".join(" ".join(p.split()) for p in prompts)
    return hashlib.sha256(normalized.encode("utf-8")).hexdigest()


def _prompts_of(messages: Sequence[dict]) -> list[str]:
    return [m["content"] for m in messages if m["role"] == "user"]


# ---------------------------------------------------------------------------
# Rate limiting and retries
# ---------------------------------------------------------------------------


class RateLimiter:
    """Token bucket shared across conversations of one backend.

    ``requests_per_minute=None`` disables limiting. Thread-safe; ``acquire``
    sleeps until a token is available.
    """

    def __init__(
        self,
        requests_per_minute: float | None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.rate = None if not requests_per_minute else requests_per_minute / 60.0
        self.capacity = max(1.0, requests_per_minute or 0.0)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.rate is None:
            return
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(
                    self.capacity, self._tokens + (now - self._last) * self.rate
                )
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


@dataclass(frozen=True)
class RetryPolicy:
    """Bounded retry: ``attempts`` tries, exponential backoff from 2 s."""

    attempts: int = 3
    base_delay: float = 2.0
    multiplier: float = 2.0
    sleep: Callable[[float], None] = time.sleep

    def delays(self) -> Iterable[float]:
        delay = self.base_delay
        for _ in range(max(0, self.attempts - 1)):
            yield delay
            delay *= self.multiplier


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class ChatBackend:
    """Interface both backends implement."""

    def ready(self) -> None:
        """Raise BackendUnavailable when the backend cannot serve requests."""

    def complete(self, messages: list[dict], params: BackendParams) -> str:
        raise NotImplementedError


class HttpChatBackend(ChatBackend):
    """Chat-completion endpoint speaking the common JSON wire format.

    The credential is read from the environment (never from flags or files);
    requests carry the model name, decoding parameters, and the full message
    list of the conversation.
    """

    def __init__(
        self,
        endpoint_url: str,
        api_key_env: str = "CHAT_API_KEY",
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ) -> None:
        self.endpoint_url = endpoint_url
        self.api_key_env = api_key_env
        self.timeout = timeout
        self._session = session or requests.Session()

    def ready(self) -> None:
        if not os.environ.get(self.api_key_env, "").strip():
            raise BackendUnavailable(
                f"no credential: set the {self.api_key_env} environment variable"
            )

    def complete(self, messages: list[dict], params: BackendParams) -> str:
        key = os.environ.get(self.api_key_env, "").strip()
        if not key:
            raise BackendUnavailable(
                f"no credential: set the {self.api_key_env} environment variable"
            )
        payload = {
            "model": params.model_name,
            "messages": messages,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "frequency_penalty": params.frequency_penalty,
            "presence_penalty": params.presence_penalty,
        }
        try:
            resp = self._session.post(
                self.endpoint_url,
                json=payload,
                headers={"Authorization": f"Bearer {key}"},
                timeout=self.timeout,
            )
        except requests.Timeout as exc:
            raise BackendTimeout(str(exc)) from exc
        except requests.ConnectionError as exc:
            raise TransientBackendError(str(exc)) from exc
        if resp.status_code in (429, 500, 502, 503, 504):
            raise TransientBackendError(f"HTTP {resp.status_code}")
        if resp.status_code in (401, 403):
            raise BackendUnavailable(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            return data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedBackendReply(f"unexpected reply shape: {exc}") from exc


class ScriptedBackend(ChatBackend):
    """Deterministic mock: context hash -> canned response.

    Records every delivered message list in ``calls`` so tests can assert the
    information-retention contract (full transcript in chat mode, exactly one
    prompt in no-chat mode).
    """

    def __init__(self, script: dict[str, str]) -> None:
        self._script = dict(script)
        self.calls: list[list[dict]] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        if not Path(path).is_file():
            raise BackendUnavailable(f"script file not found: {path}")
        return cls(load_script(path))

    def ready(self) -> None:
        if not self._script:
            raise BackendUnavailable("empty script")

    def complete(self, messages: list[dict], params: BackendParams) -> str:
        with self._lock:
            self.calls.append([dict(m) for m in messages])
        prompts = _prompts_of(messages)
        key = context_key(prompts)
        try:
            return self._script[key]
        except KeyError:
            preview = prompts[-1][:120] if prompts else ""
            raise MalformedBackendReply(
                f"no scripted response for context of {len(prompts)} prompt(s); "
                f"last prompt: {preview!r}"
            ) from None


class RecordingBackend(ChatBackend):
    """Wrap a live backend and capture (context hash, response) records."""

    def __init__(self, inner: ChatBackend) -> None:
        self.inner = inner
        self.records: dict[str, str] = {}
        self._previews: dict[str, str] = {}
        self._lock = threading.Lock()

    def ready(self) -> None:
        self.inner.ready()

    def complete(self, messages: list[dict], params: BackendParams) -> str:
        response = self.inner.complete(messages, params)
        prompts = _prompts_of(messages)
        key = context_key(prompts)
        with self._lock:
            self.records[key] = response
            self._previews[key] = prompts[-1][:80] if prompts else ""
        return response

    def write_script(self, path: str | Path) -> int:
        with self._lock:
            items = [
                {
                    "context_hash": key,
                    "response": response,
                    "prompt_preview": self._previews.get(key, ""),
                }
                for key, response in sorted(self.records.items())
            ]
        with open(path, "w", encoding="utf-8") as fh:
            for item in items:
                fh.write(json.dumps(item, ensure_ascii=False, sort_keys=True))
                fh.write("\n")
        return len(items)


def load_script(path: str | Path) -> dict[str, str]:
    script: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            script[record["context_hash"]] = record["response"]
    return script


def save_script(script: dict[str, str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(script):
            fh.write(
                json.dumps(
                    {"context_hash": key, "response": script[key]},
                    ensure_ascii=False,
                    sort_keys=True,
                )
            )
            fh.write("\n")


# ---------------------------------------------------------------------------
# Conversations
# ---------------------------------------------------------------------------


@dataclass
class Conversation:
    """A strictly sequential prompt/response dialog with one backend.

    The transcript is append-only and alternates prompt/response; decoding
    parameters are frozen at creation. ``send`` delivers the full transcript
    plus the new prompt, so the backend always sees everything said so far.
    """

    backend: ChatBackend
    params: BackendParams = field(default_factory=BackendParams)
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    limiter: RateLimiter | None = None
    transcript: list[Turn] = field(default_factory=list)

    def messages(self, prompt: str | None = None) -> list[dict]:
        msgs: list[dict] = []
        if self.params.system_prompt is not None:
            msgs.append({"role": "system", "content": self.params.system_prompt})
        for turn in self.transcript:
            role = "user" if turn.role == "prompt" else "assistant"
            msgs.append({"role": role, "content": turn.text})
        if prompt is not None:
            msgs.append({"role": "user", "content": prompt})
        return msgs

    def send(self, prompt: str) -> str:
        """Deliver the transcript plus ``prompt``; append both new turns.

        Transient failures are retried per the retry policy; the transcript
        only grows on success, so a failed send leaves it unchanged.
        """
        if not prompt:
            raise ValueError("prompt must be nonempty")
        delays = iter(self.retry.delays())
        last_error: Exception | None = None
        for attempt in range(max(1, self.retry.attempts)):
            if self.limiter is not None:
                self.limiter.acquire()
            try:
                response = self.backend.complete(self.messages(prompt), self.params)
                break
            except TransientBackendError as exc:
                last_error = exc
                delay = next(delays, None)
                if delay is not None:
                    self.retry.sleep(delay)
        else:
            raise RetriesExhausted(
                f"{self.retry.attempts} attempts failed: {last_error}"
            ) from last_error
        self.transcript.append(Turn("prompt", prompt, time.time()))
        self.transcript.append(Turn("response", response, time.time()))
        return response


def start_conversation(
    backend: ChatBackend,
    params: BackendParams | None = None,
    retry: RetryPolicy | None = None,
    limiter: RateLimiter | None = None,
) -> Conversation:
    """Open an empty conversation after checking the backend is usable."""
    backend.ready()
    return Conversation(
        backend=backend,
        params=params if params is not None else BackendParams(),
        retry=retry if retry is not None else RetryPolicy(),
        limiter=limiter,
    )


def fork_stateless(conv: Conversation) -> Conversation:
    """Fresh empty conversation sharing backend and parameters.

    Used by the no-chat ablation: each prompt runs in its own fork, so the
    backend never sees conversation history.
    """
    return Conversation(
        backend=conv.backend,
        params=replace(conv.params),
        retry=conv.retry,
        limiter=conv.limiter,
    )
