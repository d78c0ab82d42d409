"""Core value types shared across the evaluation pipeline.

Everything here is a plain immutable value object: typed facts extracted
from text, the questions derived from them, verification verdicts, and
the record/video handles the pipeline is driven by. No behavior beyond
construction-time validation and answer normalization lives here.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum


class VidFaithError(Exception):
    """Base class for errors raised by this package."""


class Task(str, Enum):
    """Direction of the pair under evaluation."""

    T2V = "t2v"
    V2T = "v2t"


class FactCategory(str, Enum):
    """Closed set of fact categories the tuple grammar accepts."""

    ENTITY = "entity"
    ATTRIBUTE = "attribute"
    RELATION = "relation"
    ACTION = "action"
    EVENT = "event"
    GLOBAL = "global"
    OTHER = "other"


class Verdict(str, Enum):
    """Outcome of verifying one question against a video.

    ``UNKNOWN`` is reserved for replies that normalize to neither yes nor
    no (or transport failures downgraded per config); ``SKIPPED`` only
    arises under lazy scheduling when an ancestor already failed.
    """

    YES = "yes"
    NO = "no"
    UNKNOWN = "unknown"
    SKIPPED = "skipped"


# Mapping fact id -> verdict for one record.
VerdictSet = dict[int, Verdict]


class VideoKind(str, Enum):
    """How a video locator should be resolved."""

    PATH = "path"
    URL = "url"
    SCENE_WORLD = "scene_world"


@dataclass(frozen=True)
class VideoRef:
    """Handle to the video side of a record.

    ``SCENE_WORLD`` locators name a JSON scene description, which lets a
    deterministic symbolic verifier stand in for a real VideoQA model.
    """

    kind: VideoKind
    locator: str


@dataclass(frozen=True)
class FactTuple:
    """One typed fact: ``<id> | <category> [- <subtype>] (<args>)``.

    ``subtype`` is free-form (the corpus contains values with internal
    spaces) and ``None`` when the source line had a bare dash or none.
    Args are stored verbatim apart from whitespace trimming; count
    expressions like ``==2`` stay as written.
    """

    fact_id: int
    category: FactCategory
    subtype: str | None
    args: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.fact_id < 1:
            raise ValueError(f"fact id must be >= 1, got {self.fact_id}")
        if not self.args or any(not a.strip() for a in self.args):
            raise ValueError(f"fact {self.fact_id}: empty args")

    def subtype_key(self) -> str | None:
        """Subtype normalized for grouping: lowercase, spaces to dashes."""
        if self.subtype is None:
            return None
        return re.sub(r"\s+", "-", self.subtype.strip().lower())


@dataclass(frozen=True)
class FactSet:
    """Ordered collection of facts with unique ids."""

    facts: tuple[FactTuple, ...]
    _by_id: dict[int, FactTuple] = field(
        repr=False, compare=False, default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "facts", tuple(self.facts))
        by_id: dict[int, FactTuple] = {}
        for fact in self.facts:
            if fact.fact_id in by_id:
                raise ValueError(f"duplicate fact id {fact.fact_id}")
            by_id[fact.fact_id] = fact
        object.__setattr__(self, "_by_id", by_id)

    def __iter__(self):
        return iter(self.facts)

    def __len__(self) -> int:
        return len(self.facts)

    def __contains__(self, fact_id: int) -> bool:
        return fact_id in self._by_id

    def get(self, fact_id: int) -> FactTuple:
        return self._by_id[fact_id]

    def ids(self) -> tuple[int, ...]:
        return tuple(f.fact_id for f in self.facts)


@dataclass(frozen=True)
class QuestionRecord:
    """Natural-language question for one fact.

    ``text`` is ``None`` for facts the question model declined to phrase
    (a literal ``nan`` line); such facts stay in the graph but are never
    sent to the verifier.
    """

    fact_id: int
    text: str | None

    @property
    def askable(self) -> bool:
        return self.text is not None


@dataclass(frozen=True)
class EvalRecord:
    """One unit of evaluation: a text/video pair plus its task direction."""

    record_id: str
    task: Task
    text: str
    video: VideoRef
    query: str | None = None


_FIRST_WORD = re.compile(r"[a-z]+")


def normalize_answer(raw: str) -> Verdict:
    """Map a free-form verifier reply onto yes/no/unknown.

    The first alphabetic token decides: a leading "yes" or "no" wins
    regardless of what follows ("No, the door is red." is a no). Anything
    else, including empty input, is unknown. Idempotent on its own
    output.
    """
    match = _FIRST_WORD.search(raw.strip().lower())
    if match is None:
        return Verdict.UNKNOWN
    head = match.group(0)
    if head == "yes":
        return Verdict.YES
    if head == "no":
        return Verdict.NO
    return Verdict.UNKNOWN
