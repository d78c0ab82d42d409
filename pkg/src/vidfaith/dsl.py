"""Line grammar for fact tuples, questions, and dependency lists.

The grammar is what LLM completions are parsed with, so leniency beats
rejection everywhere a salvageable reading exists: hard-wrapped lines are
rejoined, duplicate ids keep the first occurrence, a stray ``(`` inside
args swallows the remainder as one segment, and ``0``/self references in
dependency lists are dropped. Every deviation is reported as a typed
diagnostic so callers can still see what happened.

Fact lines: ``<id> | <category> [- <subtype>] (<arg>, <arg>, ...)``
Question lines: ``<id> | <question text>`` (literal ``nan`` = no question)
Dependency lines: ``<id> | <id-list>`` where a lone ``0`` means no parents
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

from .types import (
    FactCategory,
    FactSet,
    FactTuple,
    QuestionRecord,
    VidFaithError,
)

_ID_PIPE = re.compile(r"^(\d+)\s*\|\s*(.*)$")

# Some category taxonomies call scene-level facts "scene"; the tuple
# corpus spells them "global". Accept both, store one.
_CATEGORY_ALIASES = {"scene": FactCategory.GLOBAL}


class Severity(str, Enum):
    ERROR = "error"
    WARNING = "warning"


class DiagnosticKind(str, Enum):
    MALFORMED_LINE = "malformed_line"
    UNKNOWN_CATEGORY = "unknown_category"
    EMPTY_ARGS = "empty_args"
    DUPLICATE_ID = "duplicate_id"
    NAN_QUESTION = "nan_question"
    MISSING_ID = "missing_id"
    SELF_DEPENDENCY = "self_dependency"
    DANGLING_REFERENCE = "dangling_reference"
    CYCLE_BROKEN = "cycle_broken"


@dataclass(frozen=True)
class Diagnostic:
    """One parse observation, always naming the offending line."""

    kind: DiagnosticKind
    severity: Severity
    line_no: int
    line: str
    message: str

    @property
    def is_error(self) -> bool:
        return self.severity is Severity.ERROR


class ParseFailure(VidFaithError):
    """Raised when a whole block yields nothing usable."""

    def __init__(self, message: str, diagnostics: list[Diagnostic]):
        super().__init__(message)
        self.diagnostics = diagnostics


class _LineError(Exception):
    """Internal: one line failed; carries the diagnostic fields."""

    def __init__(self, kind: DiagnosticKind, message: str):
        super().__init__(message)
        self.kind = kind


def logical_lines(text: str) -> list[tuple[int, str]]:
    """Rejoin hard-wrapped output into ``(line_no, line)`` pairs.

    Anything up to and including the first ``output:`` token is stripped
    (completions often echo the prompt scaffold). A non-blank line that
    does not start with ``<int> |`` is a continuation of the previous
    logical line; blank lines are ignored and do not break continuation.
    """
    idx = text.find("output:")
    if idx != -1:
        text = text[idx + len("output:"):]
    lines: list[tuple[int, str]] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped:
            continue
        if _ID_PIPE.match(stripped) or not lines:
            lines.append((line_no, stripped))
        else:
            first_no, prev = lines[-1]
            lines[-1] = (first_no, prev + " " + stripped)
    return lines


def _split_args(argtext: str) -> list[str]:
    segments: list[str] = []
    current: list[str] = []
    lenient = False
    for ch in argtext:
        if not lenient and ch == ",":
            segments.append("".join(current))
            current = []
        else:
            if ch == "(":
                # nested or stray paren: stop splitting, keep the rest whole
                lenient = True
            current.append(ch)
    segments.append("".join(current))
    return [s.strip() for s in segments if s.strip()]


def _parse_fact_body(fact_id: int, body: str) -> FactTuple:
    open_paren = body.find("(")
    close_paren = body.rfind(")")
    if open_paren == -1 or close_paren < open_paren:
        raise _LineError(DiagnosticKind.MALFORMED_LINE,
                         "expected '(args)' after the category")
    head = body[:open_paren].strip()
    if "-" in head:
        cat_text, subtype_text = head.split("-", 1)
    else:
        cat_text, subtype_text = head, ""
    cat_key = cat_text.strip().lower()
    category = _CATEGORY_ALIASES.get(cat_key)
    if category is None:
        try:
            category = FactCategory(cat_key)
        except ValueError:
            raise _LineError(DiagnosticKind.UNKNOWN_CATEGORY,
                             f"unknown category {cat_text.strip()!r}") from None
    subtype = subtype_text.strip() or None
    args = _split_args(body[open_paren + 1:close_paren])
    if not args:
        raise _LineError(DiagnosticKind.EMPTY_ARGS, "no non-blank args")
    return FactTuple(fact_id, category, subtype, tuple(args))


def parse_fact_line(line: str, line_no: int = 1) -> FactTuple:
    """Parse one logical fact line; raises ParseFailure if unusable."""
    match = _ID_PIPE.match(line.strip())
    if match is None:
        diag = Diagnostic(DiagnosticKind.MALFORMED_LINE, Severity.ERROR,
                          line_no, line, "expected '<id> | ...'")
        raise ParseFailure(diag.message, [diag])
    try:
        return _parse_fact_body(int(match.group(1)), match.group(2))
    except _LineError as exc:
        diag = Diagnostic(exc.kind, Severity.ERROR, line_no, line, str(exc))
        raise ParseFailure(diag.message, [diag]) from None


def parse_fact_block(text: str) -> tuple[FactSet, list[Diagnostic]]:
    """Parse a whole completion into a FactSet.

    Unparseable logical lines each produce an error diagnostic; the
    block as a whole fails (ParseFailure) only when zero facts survive.
    Duplicate ids keep the first occurrence with a warning.
    """
    diagnostics: list[Diagnostic] = []
    facts: list[FactTuple] = []
    seen: set[int] = set()
    for line_no, line in logical_lines(text):
        match = _ID_PIPE.match(line)
        if match is None:
            diagnostics.append(Diagnostic(
                DiagnosticKind.MALFORMED_LINE, Severity.ERROR,
                line_no, line, "expected '<id> | ...'"))
            continue
        fact_id = int(match.group(1))
        if fact_id in seen:
            diagnostics.append(Diagnostic(
                DiagnosticKind.DUPLICATE_ID, Severity.WARNING,
                line_no, line, f"fact id {fact_id} repeated; keeping first"))
            continue
        try:
            fact = _parse_fact_body(fact_id, match.group(2))
        except _LineError as exc:
            diagnostics.append(Diagnostic(
                exc.kind, Severity.ERROR, line_no, line, str(exc)))
            continue
        seen.add(fact_id)
        facts.append(fact)
    if not facts:
        raise ParseFailure("no facts parsed from block", diagnostics)
    return FactSet(tuple(facts)), diagnostics


def parse_question_block(
    text: str,
    fact_ids: set[int] | None = None,
) -> tuple[list[QuestionRecord], list[Diagnostic]]:
    """Parse ``<id> | <question>`` lines.

    A body of literal ``nan`` (or nothing) keeps the id with no text.
    When ``fact_ids`` is given, ids outside it are kept but flagged.
    """
    diagnostics: list[Diagnostic] = []
    records: list[QuestionRecord] = []
    seen: set[int] = set()
    for line_no, line in logical_lines(text):
        match = _ID_PIPE.match(line)
        if match is None:
            diagnostics.append(Diagnostic(
                DiagnosticKind.MALFORMED_LINE, Severity.ERROR,
                line_no, line, "expected '<id> | <question>'"))
            continue
        fact_id = int(match.group(1))
        if fact_id in seen:
            diagnostics.append(Diagnostic(
                DiagnosticKind.DUPLICATE_ID, Severity.WARNING,
                line_no, line, f"question id {fact_id} repeated; keeping first"))
            continue
        seen.add(fact_id)
        body = match.group(2).strip()
        if not body or body.lower() == "nan":
            diagnostics.append(Diagnostic(
                DiagnosticKind.NAN_QUESTION, Severity.WARNING,
                line_no, line, f"fact {fact_id} has no question"))
            records.append(QuestionRecord(fact_id, None))
        else:
            records.append(QuestionRecord(fact_id, body))
        if fact_ids is not None and fact_id not in fact_ids:
            diagnostics.append(Diagnostic(
                DiagnosticKind.DANGLING_REFERENCE, Severity.WARNING,
                line_no, line, f"question id {fact_id} matches no fact"))
    return records, diagnostics


def parse_dependency_block(
    text: str,
    fact_ids: set[int] | None = None,
) -> tuple[dict[int, tuple[int, ...]], list[Diagnostic]]:
    """Parse ``<id> | <id-list>`` lines into a parents map.

    A lone ``0`` means no parents. Self references are dropped with a
    warning, duplicates are deduplicated, and (when ``fact_ids`` is
    given) parents naming unknown facts are dropped with a warning.
    """
    diagnostics: list[Diagnostic] = []
    deps: dict[int, tuple[int, ...]] = {}
    for line_no, line in logical_lines(text):
        match = _ID_PIPE.match(line)
        if match is None:
            diagnostics.append(Diagnostic(
                DiagnosticKind.MALFORMED_LINE, Severity.ERROR,
                line_no, line, "expected '<id> | <id-list>'"))
            continue
        fact_id = int(match.group(1))
        if fact_id in deps:
            diagnostics.append(Diagnostic(
                DiagnosticKind.DUPLICATE_ID, Severity.WARNING,
                line_no, line, f"dependency id {fact_id} repeated; keeping first"))
            continue
        tokens = [t for t in re.split(r"[,\s]+", match.group(2).strip()) if t]
        parents: list[int] = []
        bad = False
        for token in tokens:
            if not token.isdigit():
                diagnostics.append(Diagnostic(
                    DiagnosticKind.MALFORMED_LINE, Severity.ERROR,
                    line_no, line, f"non-integer parent {token!r}"))
                bad = True
                break
            parent = int(token)
            if parent == 0:
                continue
            if parent == fact_id:
                diagnostics.append(Diagnostic(
                    DiagnosticKind.SELF_DEPENDENCY, Severity.WARNING,
                    line_no, line, f"fact {fact_id} depends on itself; dropped"))
                continue
            if fact_ids is not None and parent not in fact_ids:
                diagnostics.append(Diagnostic(
                    DiagnosticKind.DANGLING_REFERENCE, Severity.WARNING,
                    line_no, line, f"parent {parent} matches no fact; dropped"))
                continue
            if parent not in parents:
                parents.append(parent)
        if not bad:
            deps[fact_id] = tuple(parents)
    return deps, diagnostics


# ---------------------------------------------------------------- rendering

def render_fact_body(fact: FactTuple) -> str:
    """The line without its id prefix: ``category - subtype (args)``."""
    head = f"{fact.category.value} - "
    if fact.subtype:
        head += f"{fact.subtype} "
    return f"{head}({', '.join(fact.args)})"


def render_fact(fact: FactTuple) -> str:
    """Canonical single-line form; parse(render(f)) == f."""
    return f"{fact.fact_id} | {render_fact_body(fact)}"


def render_fact_block(facts: FactSet) -> str:
    return "\n".join(render_fact(f) for f in facts)


def render_question_block(questions: list[QuestionRecord]) -> str:
    return "\n".join(
        f"{q.fact_id} | {q.text if q.text is not None else 'nan'}"
        for q in questions)


def render_dependency_block(deps: dict[int, tuple[int, ...]]) -> str:
    lines = []
    for fact_id in sorted(deps):
        parents = deps[fact_id]
        body = ",".join(str(p) for p in parents) if parents else "0"
        lines.append(f"{fact_id} | {body}")
    return "\n".join(lines)
