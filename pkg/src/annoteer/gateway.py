"""Chat-completion backends: an OpenAI-compatible network client with token
logprobs, and a deterministic scripted mock for offline tests and simulations.

All backends share one call contract (`complete`) plus a bounded-concurrency,
order-preserving fan-out (`complete_batch`).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import requests

API_KEY_ENV = "ANNOTEER_API_KEY"
BASE_URL_ENV = "ANNOTEER_BASE_URL"

DEFAULT_CLASSIFY_MAX_TOKENS = 1024
DEFAULT_META_MAX_TOKENS = 4096


class GatewayError(Exception):
    """Base class for completion-backend failures."""


class TransportError(GatewayError):
    """Network failure or 5xx; retryable."""


class RateLimited(GatewayError):
    """429; retryable with backoff."""

    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class AuthError(GatewayError):
    """401/403 or missing credentials; fatal."""


class CapabilityError(GatewayError):
    """Logprobs requested from a backend that cannot provide them."""


@dataclass(frozen=True)
class CompletionRequest:
    system_text: str
    user_text: str
    temperature: float = 0.0
    top_p: float = 1.0
    want_logprobs: bool = False
    max_tokens: int = DEFAULT_CLASSIFY_MAX_TOKENS


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    token_logprobs: tuple[float, ...] | None
    model_id: str
    usage: Usage = Usage()
    token_texts: tuple[str, ...] | None = None


@dataclass(frozen=True)
class BackendCapabilities:
    supports_logprobs: bool
    max_parallel_requests: int = 16


class Backend(Protocol):
    def capabilities(self) -> BackendCapabilities: ...

    def complete(self, request: CompletionRequest) -> CompletionResponse: ...


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff; only TransportError and RateLimited are retried."""

    max_attempts: int = 5
    base_delay: float = 0.5
    factor: float = 2.0

    def delay_for(self, attempt: int) -> float:
        return self.base_delay * (self.factor**attempt)


DEFAULT_RETRY = RetryPolicy()


@dataclass(frozen=True)
class BatchFailure:
    """Marker for a batch slot whose request failed after the retry budget."""

    error: GatewayError
    attempts: int


def complete_with_retry(
    backend: Backend,
    request: CompletionRequest,
    retry: RetryPolicy = DEFAULT_RETRY,
    sleep: Callable[[float], None] = time.sleep,
) -> CompletionResponse:
    attempt = 0
    while True:
        try:
            return backend.complete(request)
        except (TransportError, RateLimited) as exc:
            attempt += 1
            if attempt >= retry.max_attempts:
                raise
            delay = retry.delay_for(attempt - 1)
            if isinstance(exc, RateLimited) and exc.retry_after is not None:
                delay = max(delay, exc.retry_after)
            sleep(delay)


def complete_batch(
    backend: Backend,
    requests_: Sequence[CompletionRequest],
    max_in_flight: int = 16,
    retry: RetryPolicy = DEFAULT_RETRY,
    sleep: Callable[[float], None] = time.sleep,
) -> list[CompletionResponse | BatchFailure]:
    """Fan out requests with at most max_in_flight outstanding at once.

    Results come back in request order regardless of completion order. A slot
    that exhausts its retry budget carries a BatchFailure marker; the batch as
    a whole never aborts on a single slot.
    """
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be >= 1")
    workers = min(max_in_flight, backend.capabilities().max_parallel_requests)
    workers = max(1, min(workers, len(requests_) or 1))

    def run_one(req: CompletionRequest) -> CompletionResponse | BatchFailure:
        attempts = 0
        while True:
            attempts += 1
            try:
                return backend.complete(req)
            except (TransportError, RateLimited) as exc:
                if attempts >= retry.max_attempts:
                    return BatchFailure(error=exc, attempts=attempts)
                delay = retry.delay_for(attempts - 1)
                if isinstance(exc, RateLimited) and exc.retry_after is not None:
                    delay = max(delay, exc.retry_after)
                sleep(delay)
            except GatewayError as exc:
                return BatchFailure(error=exc, attempts=attempts)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, requests_))


class OpenAICompatBackend:
    """Client for any OpenAI-compatible /chat/completions endpoint.

    Base URL and model are configuration so local or private deployments work
    unchanged. The API key comes from ANNOTEER_API_KEY, the base URL from
    ANNOTEER_BASE_URL, unless given explicitly.
    """

    def __init__(
        self,
        model: str,
        base_url: str | None = None,
        api_key: str | None = None,
        timeout: float = 120.0,
        supports_logprobs: bool = True,
        max_parallel_requests: int = 16,
    ):
        self.model = model
        self.base_url = (base_url or os.environ.get(BASE_URL_ENV, "")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.timeout = timeout
        self._caps = BackendCapabilities(
            supports_logprobs=supports_logprobs,
            max_parallel_requests=max_parallel_requests,
        )
        if not self.base_url:
            raise AuthError(f"no base URL configured (set {BASE_URL_ENV})")
        self._local = threading.local()

    def capabilities(self) -> BackendCapabilities:
        return self._caps

    def _session(self) -> requests.Session:
        sess = getattr(self._local, "session", None)
        if sess is None:
            sess = requests.Session()
            self._local.session = sess
        return sess

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        if request.want_logprobs and not self._caps.supports_logprobs:
            raise CapabilityError("backend does not support token logprobs")
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }
        if request.want_logprobs:
            body["logprobs"] = True
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self._session().post(
                f"{self.base_url}/chat/completions",
                json=body,
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"request failed: {exc}") from exc
        if resp.status_code == 429:
            retry_after = None
            if resp.headers.get("Retry-After"):
                try:
                    retry_after = float(resp.headers["Retry-After"])
                except ValueError:
                    pass
            raise RateLimited("rate limited by backend", retry_after=retry_after)
        if resp.status_code in (401, 403):
            raise AuthError(f"authentication failed ({resp.status_code})")
        if resp.status_code >= 500:
            raise TransportError(f"server error {resp.status_code}")
        if resp.status_code >= 400:
            raise GatewayError(f"backend rejected request ({resp.status_code}): {resp.text[:500]}")
        try:
            payload = resp.json()
            choice = payload["choices"][0]
            text = choice["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion response: {exc}") from exc

        token_logprobs: tuple[float, ...] | None = None
        token_texts: tuple[str, ...] | None = None
        if request.want_logprobs:
            content = ((choice.get("logprobs") or {}).get("content")) or []
            if not content:
                raise CapabilityError("backend returned no token logprobs")
            token_logprobs = tuple(float(entry["logprob"]) for entry in content)
            token_texts = tuple(str(entry.get("token", "")) for entry in content)

        usage = payload.get("usage") or {}
        return CompletionResponse(
            text=text,
            token_logprobs=token_logprobs,
            model_id=str(payload.get("model", self.model)),
            usage=Usage(
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
            ),
            token_texts=token_texts,
        )


def text_key(text: str) -> str:
    """SHA-256 key under which a scripted answer for a record text is stored."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _derived_rng(*parts: object) -> random.Random:
    blob = "|".join(str(p) for p in parts).encode("utf-8")
    seed = int.from_bytes(hashlib.sha256(blob).digest()[:8], "big")
    return random.Random(seed)


@dataclass(frozen=True)
class ScriptedAnswer:
    """One scripted classification completion: a label (rendered into an
    ANSWER line) or full text, plus its token logprobs."""

    label: str | None = None
    logprobs: tuple[float, ...] = ()
    text: str | None = None

    def completion_text(self) -> str:
        if self.text is not None:
            return self.text
        return f"The record points to one class.\nANSWER: {self.label}"


@dataclass
class MockScript:
    """Script for the mock backend.

    answers is keyed by SHA-256 of the request user_text (use text_key). Meta
    requests (want_logprobs=False) consume meta_responses in order of first
    appearance; repeats of the same meta request replay the assigned response.
    classes feeds the fallback answer generator for unscripted requests.
    """

    answers: dict[str, ScriptedAnswer] = field(default_factory=dict)
    meta_responses: list[str] = field(default_factory=list)
    classes: tuple[str, ...] = ()


class MockBackend:
    """Deterministic scripted backend.

    Identical (seed, script, request sequence) produce identical responses.
    Unscripted classification requests get a fallback answer drawn from a
    generator keyed on (seed, user_text hash). Tracks peak concurrency so
    tests can assert the max_in_flight bound.
    """

    def __init__(
        self,
        script: MockScript | None = None,
        seed: int = 0,
        supports_logprobs: bool = True,
        max_parallel_requests: int = 64,
        latency: float = 0.0,
        fail_plan: dict[str, list[GatewayError]] | None = None,
    ):
        self.script = script or MockScript()
        self.seed = seed
        self.latency = latency
        self._caps = BackendCapabilities(
            supports_logprobs=supports_logprobs,
            max_parallel_requests=max_parallel_requests,
        )
        # fail_plan maps a user_text key to errors raised on successive calls
        # before the scripted answer goes through; used for retry tests.
        self._fail_plan = {k: list(v) for k, v in (fail_plan or {}).items()}
        self._meta_assigned: dict[str, str] = {}
        self._meta_cursor = 0
        self._lock = threading.Lock()
        self._in_flight = 0
        self.peak_in_flight = 0
        self.calls = 0

    def capabilities(self) -> BackendCapabilities:
        return self._caps

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        with self._lock:
            self._in_flight += 1
            self.calls += 1
            self.peak_in_flight = max(self.peak_in_flight, self._in_flight)
            key = text_key(request.user_text)
            plan = self._fail_plan.get(key)
        try:
            if self.latency:
                time.sleep(self.latency)
            if plan:
                with self._lock:
                    if plan:
                        raise plan.pop(0)
            if request.want_logprobs and not self._caps.supports_logprobs:
                raise CapabilityError("mock backend configured without logprob support")
            if not request.want_logprobs:
                return self._meta_complete(request, key)
            return self._classify_complete(request, key)
        finally:
            with self._lock:
                self._in_flight -= 1

    def _meta_complete(self, request: CompletionRequest, key: str) -> CompletionResponse:
        with self._lock:
            text = self._meta_assigned.get(key)
            if text is None:
                if self._meta_cursor < len(self.script.meta_responses):
                    text = self.script.meta_responses[self._meta_cursor]
                    self._meta_cursor += 1
                else:
                    text = self._fallback_prompt()
                self._meta_assigned[key] = text
        return CompletionResponse(text=text, token_logprobs=None, model_id="mock")

    def _fallback_prompt(self) -> str:
        names = ", ".join(self.script.classes) or "(no classes configured)"
        lines = [
            "You classify one text record at a time.",
            f"Pick exactly one of these classes: {names}.",
        ]
        lines += [f"- {c}: applies when the record matches {c}." for c in self.script.classes]
        lines += [
            "Reason step by step about the record, then end your reply with one line:",
            "ANSWER: <class>",
        ]
        return "\n".join(lines)

    def _classify_complete(self, request: CompletionRequest, key: str) -> CompletionResponse:
        scripted = self.script.answers.get(key)
        if scripted is not None:
            text = scripted.completion_text()
            logprobs = tuple(scripted.logprobs)
        else:
            rng = _derived_rng(self.seed, key)
            if self.script.classes:
                label = rng.choice(list(self.script.classes))
            else:
                label = "Unscripted"
            text = f"No scripted answer; picking a class.\nANSWER: {label}"
            n = rng.randint(3, 9)
            logprobs = tuple(-rng.uniform(0.01, 2.5) for _ in range(n))
        if not logprobs:
            logprobs = (math.log(0.5),)
        return CompletionResponse(
            text=text,
            token_logprobs=logprobs,
            model_id="mock",
            usage=Usage(completion_tokens=len(logprobs)),
        )


def load_mock_script(path: str | Path, id_to_text: Mapping[str, str] | None = None) -> MockScript:
    """Load a mock script file: a JSON map from record_id or text SHA-256 to
    {label, logprobs[], text?}. Reserved keys: "__meta__" (list of meta
    responses consumed in order) and "__classes__" (fallback class list).

    id_to_text resolves record_id keys to their text hashes; without it every
    non-reserved key is assumed to already be a SHA-256 hex digest.
    """
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ValueError("mock script must be a JSON object")
    answers: dict[str, ScriptedAnswer] = {}
    meta: list[str] = []
    classes: tuple[str, ...] = ()
    for key, value in raw.items():
        if key == "__meta__":
            meta = [str(v) for v in value]
            continue
        if key == "__classes__":
            classes = tuple(str(v) for v in value)
            continue
        if id_to_text is not None and key in id_to_text:
            key = text_key(id_to_text[key])
        answers[key] = ScriptedAnswer(
            label=value.get("label"),
            logprobs=tuple(float(x) for x in value.get("logprobs", ())),
            text=value.get("text"),
        )
    return MockScript(answers=answers, meta_responses=meta, classes=classes)
