"""Model-backend plumbing: prompts, transport, caching, scheduling.

Four model roles sit behind the same two call shapes. Text roles
(extraction, questions, dependencies, correction) speak a chat-completion
protocol: POST {model, messages, temperature, max_tokens}, read
choices[0].message.content. The verifier role answers one yes/no question
per call and additionally receives the video locator.

Every outbound request can be memoized in a content-addressed cache so
reruns are free and CI runs fully offline (replay_only).
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Protocol, runtime_checkable

import requests

from . import dsl, fixtures
from .dsl import Diagnostic, DiagnosticKind, ParseFailure, Severity
from .graph import Stsdg
from .types import (
    FactSet,
    QuestionRecord,
    Task,
    Verdict,
    VideoRef,
    VidFaithError,
    normalize_answer,
)

__all__ = [
    "TransportError",
    "CacheMiss",
    "PromptRole",
    "PromptTemplate",
    "default_template",
    "ChatRequest",
    "video_request",
    "request_key",
    "canonical_request",
    "ChatBackend",
    "VideoQABackend",
    "BackendConfig",
    "HttpChatBackend",
    "HttpVideoQA",
    "ScriptedBackend",
    "CallCounter",
    "ResponseCache",
    "cached_call",
    "extract_facts",
    "generate_questions",
    "generate_dependencies",
    "Schedule",
    "VerificationResult",
    "verify",
]


class TransportError(VidFaithError):
    """A backend call failed for good, retries included."""


class CacheMiss(VidFaithError):
    """Replay-only run needed a completion the cache does not hold."""


# ---------------------------------------------------------------- prompts

class PromptRole(str, Enum):
    EXTRACT_T2V = "extract_t2v"
    EXTRACT_V2T = "extract_v2t"
    QUESTION = "question"
    DEPENDENCY = "dependency"
    CORRECT_TEXT = "correct_text"
    EDIT_INSTRUCTION = "edit_instruction"


# roles that must ship few-shot demonstrations and a format line
_FEW_SHOT = frozenset({
    PromptRole.EXTRACT_T2V, PromptRole.EXTRACT_V2T,
    PromptRole.QUESTION, PromptRole.DEPENDENCY,
})

EXTRACT_PREAMBLE = (
    "Task: given input prompts, describe each scene with skill-specific "
    "tuples. Do not generate the same tuples again. Do not generate "
    "tuples that are not explicitly described in the prompts.\n"
    "output format: id | tuple"
)
QUESTION_PREAMBLE = (
    "Task: given input prompts and skill-specific tuples, re-write tuple "
    "each in natural language question.\n"
    "output format: id | question"
)
DEPENDENCY_PREAMBLE = (
    "Task: given input prompts and tuples, describe the parent tuples of "
    "each tuple.\n"
    "output format: id | dependencies."
)

_PREAMBLES = {
    PromptRole.EXTRACT_T2V: EXTRACT_PREAMBLE,
    PromptRole.EXTRACT_V2T: EXTRACT_PREAMBLE,
    PromptRole.QUESTION: QUESTION_PREAMBLE,
    PromptRole.DEPENDENCY: DEPENDENCY_PREAMBLE,
}


@dataclass(frozen=True)
class PromptTemplate:
    """Preamble plus worked demonstrations for one model role."""

    role: PromptRole
    preamble: str
    demonstrations: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if self.role in _FEW_SHOT:
            if not self.demonstrations:
                raise ValueError(
                    f"{self.role.value} template needs demonstrations")
            if "output format:" not in self.preamble:
                raise ValueError(
                    f"{self.role.value} preamble lacks the format line")

    def render(self, query_block: str) -> str:
        """Full prompt text: preamble, demonstrations, then the new input."""
        parts = [self.preamble]
        for context, output in self.demonstrations:
            parts.append(f"{context}\n{output}")
        parts.append(query_block)
        return "\n\n".join(parts)


def default_template(role: PromptRole,
                     limit: int | None = None) -> PromptTemplate:
    """Template backed by every corpus case that covers the role."""
    demos = tuple(
        case.blocks[role.value]
        for case in fixtures.fixture_suite()
        if role.value in case.blocks
    )
    if limit is not None:
        demos = demos[:limit]
    return PromptTemplate(role, _PREAMBLES[role], demos)


# ---------------------------------------------------------------- requests

@dataclass(frozen=True)
class ChatRequest:
    """One fully-specified completion call.

    content is a string for text roles; the verifier role sends a part
    list carrying the video locator next to the question.
    """

    model: str
    messages: tuple[Mapping[str, Any], ...]
    temperature: float = 0.0
    max_tokens: int = 1024


def user_request(model: str, prompt: str, *,
                 temperature: float = 0.0,
                 max_tokens: int = 1024) -> ChatRequest:
    return ChatRequest(model, ({"role": "user", "content": prompt},),
                       temperature, max_tokens)


def video_request(model: str, video: VideoRef | None,
                  question: str) -> ChatRequest:
    content = (
        {"type": "video", "video": video.locator if video else ""},
        {"type": "text", "text": question},
    )
    return ChatRequest(model, ({"role": "user", "content": content},))


def canonical_request(endpoint: str, request: ChatRequest) -> str:
    """Deterministic serialization; the sole input to the cache key."""
    return json.dumps(
        {
            "endpoint": endpoint,
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        },
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=True,
    )


def request_key(endpoint: str, request: ChatRequest) -> str:
    payload = canonical_request(endpoint, request)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- backends

@runtime_checkable
class ChatBackend(Protocol):
    def complete(self, request: ChatRequest) -> str: ...


@runtime_checkable
class VideoQABackend(Protocol):
    def answer(self, video: VideoRef | None, question: str,
               fact: object = None) -> str: ...


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for one remote model role."""

    endpoint_url: str
    model_name: str
    api_key_env_var: str = ""
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout_s: float = 60.0
    max_parallel: int = 1
    retry_attempts: int = 3
    retry_backoff_s: tuple[float, ...] = (0.5, 2.0)

    def __post_init__(self) -> None:
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be at least 1")
        if self.retry_attempts < 1:
            raise ValueError("retry_attempts must be at least 1")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BackendConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown backend fields: {sorted(extra)}")
        kwargs = dict(data)
        if "retry_backoff_s" in kwargs:
            kwargs["retry_backoff_s"] = tuple(kwargs["retry_backoff_s"])
        return cls(**kwargs)

    def to_json_dict(self) -> dict:
        return {
            "endpoint_url": self.endpoint_url,
            "model_name": self.model_name,
            "api_key_env_var": self.api_key_env_var,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "timeout_s": self.timeout_s,
            "max_parallel": self.max_parallel,
            "retry_attempts": self.retry_attempts,
            "retry_backoff_s": list(self.retry_backoff_s),
        }


# transport: (url, json body, headers, timeout) -> (status, parsed body)
Transport = Callable[[str, dict, dict, float], tuple[int, dict]]


def _post_json(url: str, body: dict, headers: dict,
               timeout_s: float) -> tuple[int, dict]:
    response = requests.post(url, json=body, headers=headers,
                             timeout=timeout_s)
    try:
        payload = response.json()
    except ValueError:
        payload = {}
    return response.status_code, payload


class HttpChatBackend:
    """Chat-completion client with retries and env-var auth.

    The API key comes from the configured environment variable and
    nowhere else; an unset variable just means an unauthenticated call.
    """

    def __init__(self, config: BackendConfig,
                 transport: Transport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self._config = config
        self._transport = transport or _post_json
        self._sleep = sleep

    @property
    def endpoint(self) -> str:
        # cache identity; the model name matters because requests with a
        # blank model field fall back to it
        return f"{self._config.endpoint_url}#{self._config.model_name}"

    @property
    def config(self) -> BackendConfig:
        return self._config

    def _headers(self) -> dict:
        headers = {"content-type": "application/json"}
        if self._config.api_key_env_var:
            key = os.environ.get(self._config.api_key_env_var)
            if key:
                headers["authorization"] = f"Bearer {key}"
        return headers

    def complete(self, request: ChatRequest) -> str:
        cfg = self._config
        body = {
            "model": request.model or cfg.model_name,
            "messages": [dict(m) for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        backoff = cfg.retry_backoff_s or (0.0,)
        last = "no attempt made"
        for attempt in range(cfg.retry_attempts):
            if attempt:
                self._sleep(backoff[min(attempt - 1, len(backoff) - 1)])
            try:
                status, payload = self._transport(
                    cfg.endpoint_url, body, self._headers(), cfg.timeout_s)
            except Exception as exc:
                last = f"transport failure: {exc}"
                continue
            if status == 200:
                try:
                    return payload["choices"][0]["message"]["content"]
                except (KeyError, IndexError, TypeError):
                    raise TransportError(
                        f"malformed completion payload from "
                        f"{cfg.endpoint_url}") from None
            if status == 429 or status >= 500:
                last = f"http {status}"
                continue
            # other 4xx will not get better by retrying
            raise TransportError(
                f"http {status} from {cfg.endpoint_url}")
        raise TransportError(
            f"{cfg.endpoint_url} failed after {cfg.retry_attempts} "
            f"attempts ({last})")


class HttpVideoQA:
    """Verifier role over a chat backend; one question per call."""

    def __init__(self, chat: ChatBackend, model: str = ""):
        self._chat = chat
        self._model = model

    @property
    def endpoint(self) -> str:
        return getattr(self._chat, "endpoint", type(self._chat).__name__)

    def answer(self, video: VideoRef | None, question: str,
               fact: object = None) -> str:
        return self._chat.complete(video_request(self._model, video,
                                                 question))


class ScriptedBackend:
    """Canned completions for tests, consumed strictly in order."""

    def __init__(self, replies: Iterable[str] = (),
                 default: str | None = None):
        self._replies = list(replies)
        self._default = default
        self.requests: list[ChatRequest] = []

    @property
    def endpoint(self) -> str:
        return "scripted"

    def complete(self, request: ChatRequest) -> str:
        self.requests.append(request)
        if self._replies:
            return self._replies.pop(0)
        if self._default is not None:
            return self._default
        raise TransportError("scripted backend exhausted")


class CallCounter:
    """Pass-through wrapper that tallies outbound calls."""

    def __init__(self, inner: object):
        self.inner = inner
        self.calls = 0
        self._lock = threading.Lock()

    @property
    def endpoint(self) -> str:
        return getattr(self.inner, "endpoint", type(self.inner).__name__)

    def _count(self) -> None:
        with self._lock:
            self.calls += 1

    def complete(self, request: ChatRequest) -> str:
        self._count()
        return self.inner.complete(request)

    def answer(self, video: VideoRef | None, question: str,
               fact: object = None) -> str:
        self._count()
        return self.inner.answer(video, question, fact)


# ---------------------------------------------------------------- cache

class ResponseCache:
    """Content-addressed completion store.

    One text file per request hash plus a JSON sidecar holding the
    request itself, so cache entries stay auditable. Writes go through a
    temp file and an atomic rename; concurrent writers of the same key
    converge on identical content.
    """

    def __init__(self, root: str | Path, replay_only: bool = False):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.replay_only = replay_only

    def _text_path(self, key: str) -> Path:
        return self.root / f"{key}.txt"

    def lookup(self, key: str) -> str | None:
        try:
            return self._text_path(key).read_text(encoding="utf-8")
        except FileNotFoundError:
            return None

    def store(self, key: str, completion: str, request_json: str) -> None:
        self._atomic_write(self.root / f"{key}.json", request_json)
        self._atomic_write(self._text_path(key), completion)

    def _atomic_write(self, target: Path, content: str) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                handle.write(content)
            os.replace(tmp, target)
        except BaseException:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
            raise

    def __len__(self) -> int:
        return sum(1 for _ in self.root.glob("*.txt"))


def cached_call(backend: ChatBackend, request: ChatRequest,
                cache: ResponseCache | None = None,
                endpoint: str | None = None) -> str:
    """Route one completion through the cache, if there is one."""
    if endpoint is None:
        endpoint = getattr(backend, "endpoint", type(backend).__name__)
    if cache is None:
        return backend.complete(request)
    key = request_key(endpoint, request)
    hit = cache.lookup(key)
    if hit is not None:
        return hit
    if cache.replay_only:
        raise CacheMiss(f"no cached completion for {key}")
    completion = backend.complete(request)
    cache.store(key, completion, canonical_request(endpoint, request))
    return completion


# ---------------------------------------------------------------- stages

def _warn(kind: DiagnosticKind, context: str, message: str) -> Diagnostic:
    return Diagnostic(kind, Severity.WARNING, 0, context, message)


def extract_facts(
    text: str,
    task: Task,
    backend: ChatBackend,
    *,
    query: str | None = None,
    cache: ResponseCache | None = None,
    template: PromptTemplate | None = None,
    model: str = "",
) -> tuple[FactSet, list[Diagnostic]]:
    """Turn free text into typed fact tuples via the extractor role."""
    if not text.strip():
        raise ValueError("cannot extract facts from empty text")
    if task is Task.V2T and query is None:
        raise ValueError("v2t extraction needs the generation query")
    if task is Task.T2V and query is not None:
        raise ValueError("t2v extraction takes no query")
    role = (PromptRole.EXTRACT_V2T if task is Task.V2T
            else PromptRole.EXTRACT_T2V)
    template = template or default_template(role)
    if task is Task.V2T:
        block = f"query: {query}\ninput: {text}\noutput:"
    else:
        block = f"input: {text}\noutput:"
    prompt = template.render(block)
    completion = cached_call(backend, user_request(model, prompt), cache)
    try:
        return dsl.parse_fact_block(completion)
    except ParseFailure as exc:
        exc.completion = completion
        raise


def generate_questions(
    facts: FactSet,
    text: str,
    backend: ChatBackend,
    *,
    cache: ResponseCache | None = None,
    template: PromptTemplate | None = None,
    model: str = "",
) -> tuple[list[QuestionRecord], list[Diagnostic]]:
    """One yes/no question per fact; facts the model skips become nan."""
    if not len(facts):
        raise ValueError("cannot generate questions without facts")
    template = template or default_template(PromptRole.QUESTION)
    block = f"input: {text}\n{dsl.render_fact_block(facts)}\noutput:"
    completion = cached_call(backend, user_request(model, template.render(
        block)), cache)
    try:
        records, diagnostics = dsl.parse_question_block(
            completion, set(facts.ids()))
    except ParseFailure as exc:
        exc.completion = completion
        raise
    known = set(facts.ids())
    records = [r for r in records if r.fact_id in known]
    covered = {r.fact_id for r in records}
    for fact_id in sorted(known - covered):
        diagnostics.append(_warn(
            DiagnosticKind.MISSING_ID, f"question {fact_id}",
            f"no question returned for fact {fact_id}; recorded as nan"))
        records.append(QuestionRecord(fact_id, None))
    records.sort(key=lambda r: r.fact_id)
    return records, diagnostics


def generate_dependencies(
    facts: FactSet,
    text: str,
    backend: ChatBackend,
    *,
    cache: ResponseCache | None = None,
    template: PromptTemplate | None = None,
    model: str = "",
) -> tuple[dict[int, tuple[int, ...]], list[Diagnostic]]:
    """Parent map over fact ids; facts the model skips get no parents."""
    if not len(facts):
        raise ValueError("cannot generate dependencies without facts")
    template = template or default_template(PromptRole.DEPENDENCY)
    block = f"input: {text}\n{dsl.render_fact_block(facts)}\noutput:"
    completion = cached_call(backend, user_request(model, template.render(
        block)), cache)
    try:
        deps, diagnostics = dsl.parse_dependency_block(
            completion, set(facts.ids()))
    except ParseFailure as exc:
        exc.completion = completion
        raise
    known = set(facts.ids())
    for fact_id in sorted(set(deps) - known):
        diagnostics.append(_warn(
            DiagnosticKind.DANGLING_REFERENCE, f"dependency {fact_id}",
            f"dependency row {fact_id} matches no fact; dropped"))
        del deps[fact_id]
    for fact_id in sorted(known - set(deps)):
        diagnostics.append(_warn(
            DiagnosticKind.MISSING_ID, f"dependency {fact_id}",
            f"no dependency row for fact {fact_id}; assuming no parents"))
        deps[fact_id] = ()
    return deps, diagnostics


# ---------------------------------------------------------------- verify

class Schedule(str, Enum):
    EAGER = "eager"
    LAZY = "lazy"


@dataclass(frozen=True)
class VerificationResult:
    """Per-fact verdicts plus how much backend traffic they cost."""

    verdicts: dict[int, Verdict]
    raw_answers: dict[int, str]
    calls: int
    schedule: Schedule
    errors: dict[int, str] = field(default_factory=dict)

    def negatives(self) -> tuple[int, ...]:
        return tuple(sorted(
            fid for fid, v in self.verdicts.items() if v is Verdict.NO))


def verify(
    video: VideoRef | None,
    facts: FactSet | None,
    questions: Sequence[QuestionRecord],
    graph: Stsdg,
    backend: VideoQABackend,
    *,
    cache: ResponseCache | None = None,
    schedule: Schedule = Schedule.LAZY,
    max_parallel: int = 1,
    model: str = "",
) -> VerificationResult:
    """Answer each askable question against the video.

    Eager asks everything (bounded by max_parallel). Lazy walks the
    graph in topological order and marks the dependents of any no as
    skipped without a call; an unknown parent does not prune, so both
    schedules agree wherever an answer was actually collected.

    A per-question transport failure degrades to unknown instead of
    aborting the run.
    """
    by_id: dict[int, QuestionRecord] = {}
    for record in questions:
        by_id.setdefault(record.fact_id, record)
    unknown_ids = [fid for fid in by_id if fid not in set(graph.node_ids)]
    if unknown_ids:
        raise ValueError(
            f"questions name ids outside the graph: {sorted(unknown_ids)}")

    verdicts: dict[int, Verdict] = {}
    raw_answers: dict[int, str] = {}
    errors: dict[int, str] = {}
    calls = 0

    def ask(record: QuestionRecord) -> tuple[int, str | None, str, int]:
        request = video_request(model, video, record.text)
        endpoint = getattr(backend, "endpoint", type(backend).__name__)
        key = request_key(endpoint, request)
        if cache is not None:
            hit = cache.lookup(key)
            if hit is not None:
                return record.fact_id, None, hit, 0
            if cache.replay_only:
                raise CacheMiss(f"no cached answer for {key}")
        fact = facts.get(record.fact_id) \
            if facts and record.fact_id in facts else None
        try:
            reply = backend.answer(video, record.text, fact)
        except TransportError as exc:
            return record.fact_id, str(exc), "", 1
        if cache is not None:
            cache.store(key, reply, canonical_request(endpoint, request))
        return record.fact_id, None, reply, 1

    def settle(fact_id: int, error: str | None, reply: str,
               cost: int) -> None:
        nonlocal calls
        calls += cost
        raw_answers[fact_id] = reply
        if error is not None:
            errors[fact_id] = error
            verdicts[fact_id] = Verdict.UNKNOWN
        else:
            verdicts[fact_id] = normalize_answer(reply)

    askable = [by_id[fid] for fid in sorted(by_id) if by_id[fid].askable]

    if schedule is Schedule.EAGER:
        if max_parallel > 1 and len(askable) > 1:
            with ThreadPoolExecutor(max_workers=max_parallel) as pool:
                for result in pool.map(ask, askable):
                    settle(*result)
        else:
            for record in askable:
                settle(*ask(record))
        return VerificationResult(verdicts, raw_answers, calls, schedule,
                                  errors)

    # lazy: topological sweep, pruning below every definite no
    askable_ids = {record.fact_id for record in askable}
    blocking = (Verdict.NO, Verdict.SKIPPED)
    for node in graph.topological_order():
        if node not in askable_ids:
            continue
        if any(verdicts.get(parent) in blocking
               for parent in graph.parents[node]):
            verdicts[node] = Verdict.SKIPPED
            raw_answers[node] = ""
            continue
        settle(*ask(by_id[node]))
    return VerificationResult(verdicts, raw_answers, calls, schedule, errors)
