"""Hallucination repair, plus the stage composition it is built on.

After verification tells us which facts the video refutes, there are two
ways out. For captions (v2t) the text is the suspect: feed the QA
transcript back to a language model and ask for a rewrite. For generated
video (t2v) the prompt is ground truth and the video is the suspect:
turn each failed fact into an imperative edit and hand it to a video
editor. Either way the pair can then be re-evaluated end to end.
"""

from __future__ import annotations

import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from dataclasses import replace as _dc_replace
from typing import Protocol, runtime_checkable

import requests

from .dsl import Diagnostic, ParseFailure
from .gateway import (
    BackendConfig,
    ChatBackend,
    ResponseCache,
    Schedule,
    VerificationResult,
    VideoQABackend,
    cached_call,
    extract_facts,
    generate_dependencies,
    generate_questions,
    user_request,
    verify,
)
from .graph import CyclePolicy, Stsdg, build_graph
from .oracle import EditorError
from .scoring import FaithfulnessReport, ScoringConfig, score_verdicts
from .types import (
    EvalRecord,
    FactSet,
    QuestionRecord,
    Task,
    Verdict,
    VideoRef,
    VidFaithError,
)

__all__ = [
    "NoNegatives",
    "CorrectionRoundFailed",
    "QaPair",
    "qa_pairs",
    "build_correction_prompt",
    "build_edit_prompt",
    "correct_text",
    "build_edit_instruction",
    "EditorClient",
    "HttpEditorClient",
    "edit_video",
    "PipelineHandles",
    "EvaluationArtifacts",
    "evaluate_record",
    "CorrectionResult",
    "run_correction_loop",
]


class NoNegatives(VidFaithError):
    """Edit instructions were requested but nothing failed."""


class CorrectionRoundFailed(VidFaithError):
    """A correction stage died; carries which round and the cause."""

    def __init__(self, round_no: int, cause: Exception):
        super().__init__(f"correction round {round_no} failed: {cause}")
        self.round_no = round_no
        self.cause = cause


_ANSWER_WORDS = {
    Verdict.YES: "yes",
    Verdict.NO: "no",
    Verdict.UNKNOWN: "uncertain",
}


@dataclass(frozen=True)
class QaPair:
    """One verified question, ready for a correction prompt."""

    fact_id: int
    question: str
    answer: Verdict

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError("qa pair needs a question")
        if self.answer not in _ANSWER_WORDS:
            raise ValueError(f"unreportable answer {self.answer!r}")

    def render(self) -> str:
        return f"Q: {self.question} A: {_ANSWER_WORDS[self.answer]}"


def qa_pairs(questions: Sequence[QuestionRecord],
             result: VerificationResult) -> list[QaPair]:
    """Answered questions in fact-id order; skipped and nan rows drop out."""
    pairs = []
    for record in sorted(questions, key=lambda r: r.fact_id):
        if not record.askable:
            continue
        verdict = result.verdicts.get(record.fact_id)
        if verdict is None or verdict is Verdict.SKIPPED:
            continue
        pairs.append(QaPair(record.fact_id, record.text, verdict))
    return pairs


# ---------------------------------------------------------------- prompts

REWRITE_SENTENCE = (
    "rewrite the original response so it no longer asserts the facts "
    "answered 'no', keeping everything else unchanged. return only the "
    "rewritten response."
)
CONFIRM_SENTENCE = (
    "every fact was verified. return the original response unchanged."
)
EDIT_SENTENCE = "write one imperative editing instruction per failed fact."


def _qa_block(pairs: Sequence[QaPair]) -> list[str]:
    ordered = sorted(pairs, key=lambda p: p.fact_id)
    return [p.render() for p in ordered]


def build_correction_prompt(text: str, pairs: Sequence[QaPair]) -> str:
    """Deterministic rewrite prompt; pure, so goldens can pin it."""
    if not pairs:
        raise ValueError("need at least one qa pair")
    closing = (REWRITE_SENTENCE
               if any(p.answer is Verdict.NO for p in pairs)
               else CONFIRM_SENTENCE)
    lines = ["original response:", text, "", "verification results:"]
    lines.extend(_qa_block(pairs))
    lines.extend(["", closing])
    return "\n".join(lines)


def build_edit_prompt(prompt_text: str, pairs: Sequence[QaPair]) -> str:
    if not pairs:
        raise ValueError("need at least one qa pair")
    lines = ["original prompt:", prompt_text, "", "verification results:"]
    lines.extend(_qa_block(pairs))
    lines.extend(["", EDIT_SENTENCE])
    return "\n".join(lines)


def correct_text(record: EvalRecord, pairs: Sequence[QaPair],
                 backend: ChatBackend,
                 cache: ResponseCache | None = None) -> str:
    """One completion over the rewrite prompt, returned verbatim."""
    if record.task is not Task.V2T:
        raise ValueError("text correction only applies to v2t records")
    prompt = build_correction_prompt(record.text, pairs)
    return cached_call(backend, user_request("", prompt), cache)


def build_edit_instruction(prompt_text: str, pairs: Sequence[QaPair],
                           backend: ChatBackend,
                           cache: ResponseCache | None = None) -> str:
    """Imperative edit line(s) for the failed facts, in fact-id order."""
    if not any(p.answer is Verdict.NO for p in pairs):
        raise NoNegatives("no failed facts to write instructions for")
    prompt = build_edit_prompt(prompt_text, pairs)
    return cached_call(backend, user_request("", prompt), cache)


# ---------------------------------------------------------------- editing

@runtime_checkable
class EditorClient(Protocol):
    def edit(self, video: VideoRef, instruction: str) -> VideoRef: ...


class HttpEditorClient:
    """Remote editor: POST {video, instruction}, get a new locator back."""

    def __init__(self, config: BackendConfig,
                 transport: Callable | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self._config = config
        self._transport = transport or self._post
        self._sleep = sleep

    @staticmethod
    def _post(url: str, body: dict, headers: dict,
              timeout_s: float) -> tuple[int, dict]:
        response = requests.post(url, json=body, headers=headers,
                                 timeout=timeout_s)
        try:
            payload = response.json()
        except ValueError:
            payload = {}
        return response.status_code, payload

    def edit(self, video: VideoRef, instruction: str) -> VideoRef:
        cfg = self._config
        body = {"video": video.locator, "instruction": instruction}
        backoff = cfg.retry_backoff_s or (0.0,)
        last = "no attempt made"
        for attempt in range(cfg.retry_attempts):
            if attempt:
                self._sleep(backoff[min(attempt - 1, len(backoff) - 1)])
            try:
                status, payload = self._transport(
                    cfg.endpoint_url, body,
                    {"content-type": "application/json"}, cfg.timeout_s)
            except Exception as exc:
                last = f"transport failure: {exc}"
                continue
            if status == 200:
                locator = payload.get("video")
                if not isinstance(locator, str) or not locator:
                    raise EditorError(
                        f"editor returned no locator for {instruction!r}")
                return VideoRef(video.kind, locator)
            if status == 429 or status >= 500:
                last = f"http {status}"
                continue
            raise EditorError(f"editor rejected the request: http {status}")
        raise EditorError(
            f"editor unreachable after {cfg.retry_attempts} attempts "
            f"({last})")


def edit_video(video: VideoRef, instruction: str,
               editor: EditorClient) -> VideoRef:
    return editor.edit(video, instruction)


# ---------------------------------------------------------------- pipeline

@dataclass
class PipelineHandles:
    """Every backend one evaluation needs, bundled for passing around."""

    extractor: ChatBackend
    questioner: ChatBackend
    dependency: ChatBackend
    verifier: VideoQABackend
    corrector: ChatBackend | None = None
    instructor: ChatBackend | None = None
    editor: EditorClient | None = None
    cache: ResponseCache | None = None
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    schedule: Schedule = Schedule.LAZY
    # model outputs may contain cycles; a run should survive them
    cycle_policy: CyclePolicy = CyclePolicy.BREAK
    max_parallel: int = 1


@dataclass(frozen=True)
class EvaluationArtifacts:
    """Everything one pass over a record produces."""

    facts: FactSet
    questions: tuple[QuestionRecord, ...]
    deps: dict[int, tuple[int, ...]]
    graph: Stsdg
    verification: VerificationResult
    report: FaithfulnessReport
    diagnostics: tuple[Diagnostic, ...]


def evaluate_record(record: EvalRecord,
                    handles: PipelineHandles) -> EvaluationArtifacts:
    """Full pass: extract, question, link, verify, score."""
    facts, diags = extract_facts(
        record.text, record.task, handles.extractor,
        query=record.query, cache=handles.cache)
    questions, q_diags = generate_questions(
        facts, record.text, handles.questioner, cache=handles.cache)
    deps, d_diags = generate_dependencies(
        facts, record.text, handles.dependency, cache=handles.cache)
    graph, g_diags = build_graph(facts, deps, handles.cycle_policy)
    verification = verify(
        record.video, facts, questions, graph, handles.verifier,
        cache=handles.cache, schedule=handles.schedule,
        max_parallel=handles.max_parallel)
    report = score_verdicts(facts, graph, verification.verdicts,
                            handles.scoring, questions=list(questions))
    return EvaluationArtifacts(
        facts=facts,
        questions=tuple(questions),
        deps=deps,
        graph=graph,
        verification=verification,
        report=report,
        diagnostics=tuple(diags + q_diags + d_diags + g_diags),
    )


# ---------------------------------------------------------------- the loop

@dataclass(frozen=True)
class CorrectionResult:
    """Outcome of one repair loop over a single record."""

    original: str | VideoRef
    revised: str | VideoRef
    edit_instruction: str | None
    pre_score: FaithfulnessReport | None
    post_score: FaithfulnessReport | None
    rounds: int
    corrections: int

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("a loop always runs at least one round")


def run_correction_loop(record: EvalRecord, handles: PipelineHandles,
                        max_rounds: int = 1,
                        rescore: bool = True) -> CorrectionResult:
    """Verify, repair what failed, and (optionally) re-score the result.

    v2t rounds rewrite the text and re-extract facts from the revision;
    t2v rounds keep the prompt's facts fixed and edit the video. The loop
    stops at the first clean verification or after max_rounds repairs.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")

    artifacts = evaluate_record(record, handles)
    pre = artifacts.report
    report: FaithfulnessReport | None = artifacts.report
    verification = artifacts.verification
    facts, questions, graph = (artifacts.facts, artifacts.questions,
                               artifacts.graph)

    current_text = record.text
    current_video = record.video
    instructions: list[str] = []
    corrections = 0

    while corrections < max_rounds:
        if not verification.negatives():
            break
        pairs = qa_pairs(questions, verification)
        try:
            if record.task is Task.V2T:
                if handles.corrector is None:
                    raise ValueError("no corrector backend configured")
                working = _dc_replace(record, text=current_text)
                current_text = correct_text(
                    working, pairs, handles.corrector, handles.cache)
            else:
                if handles.instructor is None or handles.editor is None:
                    raise ValueError("t2v correction needs an instructor "
                                     "and an editor")
                instruction = build_edit_instruction(
                    record.text, pairs, handles.instructor, handles.cache)
                instructions.append(instruction)
                current_video = edit_video(current_video, instruction,
                                           handles.editor)
        except VidFaithError as exc:
            raise CorrectionRoundFailed(corrections + 1, exc) from exc
        corrections += 1

        if not rescore and corrections >= max_rounds:
            report = None
            break

        if record.task is Task.V2T:
            # the revision is new text: facts must come from it
            try:
                artifacts = evaluate_record(
                    _dc_replace(record, text=current_text), handles)
            except (ParseFailure, ValueError):
                report = None
                break
            verification = artifacts.verification
            report = artifacts.report
            facts, questions, graph = (artifacts.facts, artifacts.questions,
                                       artifacts.graph)
        else:
            verification = verify(
                current_video, facts, questions, graph, handles.verifier,
                cache=handles.cache, schedule=handles.schedule,
                max_parallel=handles.max_parallel)
            report = score_verdicts(facts, graph, verification.verdicts,
                                    handles.scoring,
                                    questions=list(questions))

    is_v2t = record.task is Task.V2T
    return CorrectionResult(
        original=record.text if is_v2t else record.video,
        revised=current_text if is_v2t else current_video,
        edit_instruction="\n".join(instructions) if instructions else None,
        pre_score=pre,
        post_score=report if rescore else None,
        rounds=max(1, corrections),
        corrections=corrections,
    )
