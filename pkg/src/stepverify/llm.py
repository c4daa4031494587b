"""Chat-completion client: retrying transport, a concurrency cap, and mock backends."""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

import requests

from .core import Problem, Trajectory, content_hash

logger = logging.getLogger(__name__)


class LlmError(Exception):
    """Base class for completion-endpoint failures."""


class TransportError(LlmError):
    """Network-level or 5xx failure; safe to retry."""


class AuthError(LlmError):
    """Credential rejection; never retried."""


class MalformedResponse(LlmError):
    """The endpoint answered but the payload is unusable; never retried."""


@dataclass(frozen=True)
class CompletionRequest:
    model: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    n: int = 1
    purpose: str = "general"

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a completion request needs at least one message")
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")

    @property
    def fingerprint(self) -> str:
        """Content digest used for logging and mock-script routing.

        Depends only on request content, so concurrent schedules cannot
        change which response a given request receives.
        """
        payload = json.dumps(
            {
                "purpose": self.purpose,
                "model": self.model,
                "messages": list(self.messages),
                "n": self.n,
            },
            ensure_ascii=False,
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def content(self) -> str:
        return "\n".join(content for _, content in self.messages)


@dataclass(frozen=True)
class CompletionResponse:
    choices: tuple[str, ...]
    backend_id: str
    usage: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class AttemptRecord:
    purpose: str
    fingerprint: str
    attempt: int
    status: str
    detail: str = ""


class Backend(Protocol):
    backend_id: str

    def complete(self, request: CompletionRequest) -> CompletionResponse: ...


class HttpBackend:
    """OpenAI-style chat-completions endpoint over HTTP."""

    def __init__(
        self,
        endpoint_url: str,
        *,
        api_key: str | None = None,
        timeout_seconds: float = 60.0,
        session: requests.Session | None = None,
    ) -> None:
        self.endpoint_url = endpoint_url
        self.api_key = api_key
        self.timeout_seconds = timeout_seconds
        self.backend_id = "http"
        self._session = session or requests.Session()

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": request.model,
            "messages": [{"role": role, "content": content} for role, content in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "n": request.n,
        }
        try:
            response = self._session.post(
                self.endpoint_url, json=body, headers=headers, timeout=self.timeout_seconds
            )
        except requests.RequestException as exc:
            raise TransportError(f"request to {self.endpoint_url} failed: {exc}") from exc
        if response.status_code in (401, 403):
            raise AuthError(f"endpoint rejected credentials (HTTP {response.status_code})")
        if response.status_code >= 500:
            raise TransportError(f"endpoint error HTTP {response.status_code}")
        if response.status_code >= 400:
            raise MalformedResponse(f"endpoint rejected request (HTTP {response.status_code}): {response.text[:500]}")
        try:
            payload = response.json()
            choices = tuple(choice["message"]["content"] for choice in payload["choices"])
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedResponse(f"unparseable completion payload: {exc}") from exc
        return CompletionResponse(choices=choices, backend_id=self.backend_id, usage=payload.get("usage", {}))


_SCRIPT_ERRORS = {
    "transport": TransportError,
    "auth": AuthError,
    "malformed": MalformedResponse,
}


class MockBackend:
    """Deterministic stand-in for a completion endpoint.

    Scripted entries are matched by purpose and an optional content
    substring, consumed in order unless marked ``repeat``.  With
    ``synthesize`` enabled, unmatched requests get a rule-generated reply
    derived from the request content hash, so identical requests always
    see identical responses regardless of scheduling.
    """

    def __init__(self, entries: list[dict[str, Any]] | None = None, *, synthesize: bool = False) -> None:
        self.backend_id = "mock"
        self.synthesize = synthesize
        self._entries = [dict(entry) for entry in entries or []]
        self._lock = threading.Lock()
        self._sequence: dict[str, int] = {}
        self.calls: list[CompletionRequest] = []

    @classmethod
    def from_script(cls, path: str, *, synthesize: bool = False) -> "MockBackend":
        with open(path, "r", encoding="utf-8") as handle:
            script = json.load(handle)
        return cls(script.get("entries", []), synthesize=synthesize)

    def calls_for(self, purpose: str) -> int:
        with self._lock:
            return sum(1 for request in self.calls if request.purpose == purpose)

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        with self._lock:
            self.calls.append(request)
            sequence = self._sequence.get(request.fingerprint, 0)
            self._sequence[request.fingerprint] = sequence + 1
            entry = self._match_entry(request)
        if entry is not None:
            error = entry.get("error")
            if error:
                raise _SCRIPT_ERRORS[error](f"scripted {error} failure for purpose {request.purpose!r}")
            return CompletionResponse(choices=tuple(entry["choices"]), backend_id=self.backend_id)
        if self.synthesize:
            return CompletionResponse(
                choices=tuple(synthesize_choices(request, sequence)), backend_id=self.backend_id
            )
        raise MalformedResponse(f"no scripted mock response for purpose {request.purpose!r}")

    def _match_entry(self, request: CompletionRequest) -> dict[str, Any] | None:
        content = request.content()
        for entry in self._entries:
            if entry.get("purpose") and entry["purpose"] != request.purpose:
                continue
            needle = entry.get("match")
            if needle and needle not in content:
                continue
            if entry.get("_used") and not entry.get("repeat"):
                continue
            if not entry.get("repeat"):
                entry["_used"] = True
            return entry
        return None


def _hash_int(text: str) -> int:
    return int(hashlib.sha256(text.encode("utf-8")).hexdigest(), 16)


def _section_after(content: str, marker: str) -> str:
    """Text following a prompt section marker, up to the next blank-line-delimited header."""
    idx = content.rfind(marker)
    if idx < 0:
        return content
    tail = content[idx + len(marker) :].lstrip(": \n")
    return tail.strip()


# Prompt section markers shared with the bundled templates; the synthetic
# rules key their behavior on the step or statement text alone so that the
# resulting state of a step never depends on scheduling.
STEP_MARKER = "Step:"
STATEMENT_MARKER = "```lean"


def synthesize_choices(request: CompletionRequest, sequence: int) -> list[str]:
    """Rule-generated mock replies per purpose; see MockBackend."""
    content = request.content()
    if request.purpose == "sample":
        digest = _hash_int(content)
        choices = []
        for k in range(request.n):
            value = (digest // (k + 1)) % 97
            choices.append(
                f"Approach {k + 1}: restate what is asked. "
                f"Work through the quantities to get {value}. "
                f"The answer is \\boxed{{{value}}}."
            )
        return choices
    if request.purpose == "formalize":
        step_text = _section_after(content, STEP_MARKER).split("\n")[0]
        digest = _hash_int(step_text)
        bucket = digest % 100
        if bucket < 6:
            return ["NO_VERIFICATION_NEEDED"]
        if bucket < 16:
            return ["```lean\ntheorem claim : FAKE_INVALID := by sorry\n```"]
        a = digest % 89
        b = (digest // 89) % 83
        return [
            f"```lean\ntheorem claim_{digest % 100000} : {a} + {b} = {a + b} := by sorry\n```"
        ]
    if request.purpose == "prove":
        statement = _section_after(content, STATEMENT_MARKER)
        statement = statement.split("```")[0].strip()
        digest = _hash_int(statement)
        attempt = sequence + 1
        if digest % 100 < 75:
            success_at = (digest // 100) % 6 + 1
            tactic = "norm_num" if attempt == success_at else "FAKE_FAIL"
        else:
            tactic = "FAKE_FAIL"
        return [f"```lean\n{statement.replace(':= by sorry', '').rstrip()} := by\n  -- candidate {attempt}\n  {tactic}\n```"]
    if request.purpose == "decompose":
        return ["I cannot produce the requested JSON."]
    if request.purpose == "judge":
        subject = _section_after(content, STATEMENT_MARKER)
        digest = _hash_int(subject)
        if "Category:" in content:
            labels = ["GEOMETRY", "NUMBER_THEORY", "ALGEBRA", "COMBINATORICS", "OTHERS"]
            return [labels[digest % len(labels)]]
        bucket = digest % 1000
        if bucket < 809:
            return ["GOOD"]
        if bucket < 813:
            return ["FAIR"]
        return ["POOR"]
    digest = _hash_int(content)
    return [f"mock reply {digest % 10**8}" for _ in range(request.n)]


class LlmClient:
    """Wraps a backend with bounded retries, backoff, and a global concurrency cap."""

    def __init__(
        self,
        backend: Backend,
        *,
        model: str = "mock-model",
        temperature: float = 0.7,
        max_tokens: int = 1024,
        max_retries: int = 2,
        backoff_seconds: float = 0.5,
        max_concurrency: int = 8,
        limiter: threading.BoundedSemaphore | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        self.backend = backend
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.max_retries = max_retries
        self.backoff_seconds = backoff_seconds
        self._limiter = limiter or threading.BoundedSemaphore(max_concurrency)
        self._sleep = sleep
        self._log_lock = threading.Lock()
        self.attempt_log: list[AttemptRecord] = []

    def _record(self, request: CompletionRequest, attempt: int, status: str, detail: str = "") -> None:
        with self._log_lock:
            self.attempt_log.append(
                AttemptRecord(request.purpose, request.fingerprint, attempt, status, detail)
            )

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        last_error: TransportError | None = None
        for attempt in range(1, self.max_retries + 2):
            if attempt > 1:
                self._sleep(self.backoff_seconds * 2 ** (attempt - 2))
            try:
                with self._limiter:
                    response = self.backend.complete(request)
            except TransportError as exc:
                self._record(request, attempt, "transport_error", str(exc))
                last_error = exc
                continue
            except LlmError as exc:
                self._record(request, attempt, "error", str(exc))
                raise
            if not response.choices:
                self._record(request, attempt, "malformed", "no choices")
                raise MalformedResponse("completion response carried no choices")
            self._record(request, attempt, "ok")
            return response
        assert last_error is not None
        raise last_error

    def request(
        self,
        prompt: str,
        *,
        purpose: str,
        system: str | None = None,
        n: int = 1,
        temperature: float | None = None,
        max_tokens: int | None = None,
    ) -> CompletionResponse:
        messages: tuple[tuple[str, str], ...]
        if system is not None:
            messages = (("system", system), ("user", prompt))
        else:
            messages = (("user", prompt),)
        return self.complete(
            CompletionRequest(
                model=self.model,
                messages=messages,
                temperature=self.temperature if temperature is None else temperature,
                max_tokens=self.max_tokens if max_tokens is None else max_tokens,
                n=n,
                purpose=purpose,
            )
        )


def sample_cot(
    problem: Problem,
    n: int,
    client: LlmClient,
    *,
    system_prompt: str,
    temperature: float | None = None,
    max_tokens: int | None = None,
) -> list[Trajectory]:
    """Draw n chain-of-thought solutions for one problem in a single request.

    The endpoint must return exactly n choices; anything shorter is a
    malformed response rather than a silently truncated sample set.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    response = client.request(
        f"{problem.statement}\n\nLet's think step by step.",
        purpose="sample",
        system=system_prompt,
        n=n,
        temperature=temperature,
        max_tokens=max_tokens,
    )
    if len(response.choices) != n:
        raise MalformedResponse(
            f"requested {n} completions but received {len(response.choices)}"
        )
    return [Trajectory(problem_id=problem.id, raw_text=text) for text in response.choices]


def trajectory_key(raw_text: str) -> str:
    """Short content key for per-trajectory score scripting."""
    return content_hash(raw_text, 12)
