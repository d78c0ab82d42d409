"""Verdicts to scores to one faithfulness value.

Raw scores are binary per fact. Refinement gates each fact by its
parents in the dependency graph, either one level deep (direct) or all
the way up (transitive). The aggregate is a plain average whose
denominator depends on how invalidated facts are handled.

Facts outside the scoring universe (no question was ever produced for
them, or their answer was unknown under the exclude setting) never
count toward the average, but failures still propagate through them:
they act as pass-through nodes with a surrogate raw score of 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .graph import Stsdg
from .types import (
    FactCategory,
    FactSet,
    FactTuple,
    QuestionRecord,
    Verdict,
    VerdictSet,
    VidFaithError,
)


class Propagation(str, Enum):
    DIRECT = "direct"
    TRANSITIVE = "transitive"


class InvalidHandling(str, Enum):
    ZERO = "zero"
    EXCLUDE = "exclude"


class UnknownAs(str, Enum):
    NO = "no"
    EXCLUDE = "exclude"


class NanFactHandling(str, Enum):
    EXCLUDE = "exclude"
    ZERO = "zero"


@dataclass(frozen=True)
class ScoringConfig:
    propagation: Propagation = Propagation.TRANSITIVE
    invalid_handling: InvalidHandling = InvalidHandling.ZERO
    unknown_as: UnknownAs = UnknownAs.NO
    nan_fact_handling: NanFactHandling = NanFactHandling.EXCLUDE

    def to_dict(self) -> dict[str, str]:
        return {
            "propagation": self.propagation.value,
            "invalid_handling": self.invalid_handling.value,
            "unknown_as": self.unknown_as.value,
            "nan_fact_handling": self.nan_fact_handling.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScoringConfig":
        return cls(
            propagation=Propagation(data.get("propagation", "transitive")),
            invalid_handling=InvalidHandling(
                data.get("invalid_handling", "zero")),
            unknown_as=UnknownAs(data.get("unknown_as", "no")),
            nan_fact_handling=NanFactHandling(
                data.get("nan_fact_handling", "exclude")),
        )


class MissingVerdict(VidFaithError):
    def __init__(self, fact_id: int):
        super().__init__(f"no verdict for fact {fact_id}")
        self.fact_id = fact_id


class EmptyUniverse(VidFaithError):
    """Every fact was excluded; the average is undefined, not zero."""


def answers_to_scores(verdicts: VerdictSet,
                      cfg: ScoringConfig) -> dict[int, int]:
    """yes -> 1, no/skipped -> 0, unknown per configuration.

    Under unknown_as=exclude the unknown ids are simply absent from the
    result, which removes them from the scoring universe.
    """
    raw: dict[int, int] = {}
    for fact_id, verdict in verdicts.items():
        if verdict is Verdict.YES:
            raw[fact_id] = 1
        elif verdict is Verdict.UNKNOWN:
            if cfg.unknown_as is UnknownAs.NO:
                raw[fact_id] = 0
        else:
            raw[fact_id] = 0
    return raw


def negative_ids(verdicts: VerdictSet, cfg: ScoringConfig) -> set[int]:
    """Facts whose own answer failed: the seeds of the invalidated closure.

    Skipped verdicts are not negatives; they only ever arise downstream
    of one, so the closure already covers them.
    """
    negatives: set[int] = set()
    for fact_id, verdict in verdicts.items():
        if verdict is Verdict.NO:
            negatives.add(fact_id)
        elif verdict is Verdict.UNKNOWN and cfg.unknown_as is UnknownAs.NO:
            negatives.add(fact_id)
    return negatives


def refine_scores(g: Stsdg, raw: dict[int, int],
                  cfg: ScoringConfig) -> dict[int, int]:
    """Gate each raw score by its parents.

    Graph nodes missing from ``raw`` are out of the scoring universe;
    they pass their parents' failures through (surrogate raw score 1)
    and get no refined score of their own.
    """
    if cfg.propagation is Propagation.DIRECT:
        refined = {}
        for fact_id, score in raw.items():
            for parent in g.parents.get(fact_id, ()):
                score *= raw.get(parent, 1)
            refined[fact_id] = score
        return refined

    value: dict[int, int] = {}
    for node in g.topological_order():
        score = raw.get(node, 1)
        for parent in g.parents[node]:
            score *= value[parent]
        value[node] = score
    for fact_id, score in raw.items():
        value.setdefault(fact_id, score)
    return {fact_id: value[fact_id] for fact_id in raw}


def aggregate(refined: dict[int, int],
              invalid: frozenset[int] | set[int] = frozenset()) -> float:
    """Average refined scores over the universe minus ``invalid``."""
    universe = [score for fact_id, score in refined.items()
                if fact_id not in invalid]
    if not universe:
        raise EmptyUniverse("no facts left to average")
    return sum(universe) / len(universe)


# --------------------------------------------------------------- breakdown

BUCKETS = ("Entity", "Attribute", "Spatial", "Temporal", "Action", "Event")


def bucket_for(fact: FactTuple) -> str:
    """Map a fact to its report column.

    Counts, text rendering, and scene-level facts all describe
    appearance, so they share the Attribute column; temporal relations
    and temporal events share the Temporal column.
    """
    subtype = fact.subtype_key()
    if fact.category is FactCategory.ENTITY:
        return "Entity"
    if fact.category in (FactCategory.ATTRIBUTE, FactCategory.GLOBAL,
                         FactCategory.OTHER):
        return "Attribute"
    if fact.category is FactCategory.RELATION:
        return "Temporal" if subtype == "temporal" else "Spatial"
    if fact.category is FactCategory.ACTION:
        return "Action"
    return "Temporal" if subtype == "temporal" else "Event"


def category_breakdown(facts: FactSet,
                       refined: dict[int, int],
                       invalid: frozenset[int] | set[int] = frozenset(),
                       ) -> dict[str, tuple[int, int]]:
    """Per-bucket (supported, total) over the scored universe."""
    supported = dict.fromkeys(BUCKETS, 0)
    total = dict.fromkeys(BUCKETS, 0)
    for fact in facts:
        if fact.fact_id not in refined or fact.fact_id in invalid:
            continue
        bucket = bucket_for(fact)
        total[bucket] += 1
        supported[bucket] += refined[fact.fact_id]
    return {b: (supported[b], total[b]) for b in BUCKETS}


# ------------------------------------------------------------------ report

@dataclass(frozen=True)
class FactScore:
    fact_id: int
    category: str
    subtype: str | None
    bucket: str
    refined: int


@dataclass(frozen=True)
class FaithfulnessReport:
    """Everything scoring produces for one (video, text) record.

    Holds refined scores only; raw verdicts stay with the verification
    result so the report is identical however the questions were
    scheduled.
    """

    f_hat: float | None
    n_facts: int
    n_scored: int
    n_supported: int
    excluded: tuple[int, ...]
    rows: tuple[FactScore, ...]
    breakdown: dict[str, tuple[int, int]]
    config: dict[str, str] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "f_hat": self.f_hat,
            "n_facts": self.n_facts,
            "n_scored": self.n_scored,
            "n_supported": self.n_supported,
            "excluded": list(self.excluded),
            "rows": [
                {
                    "fact_id": r.fact_id,
                    "category": r.category,
                    "subtype": r.subtype,
                    "bucket": r.bucket,
                    "refined": r.refined,
                }
                for r in self.rows
            ],
            "breakdown": {
                b: {"supported": s, "total": t}
                for b, (s, t) in self.breakdown.items()
            },
            "config": dict(self.config),
        }

    def render_table(self) -> str:
        value = "n/a" if self.f_hat is None else f"{self.f_hat:.4f}"
        lines = [
            f"faithfulness: {value}  "
            f"({self.n_supported}/{self.n_scored} facts supported)",
            f"{'bucket':<10} {'supported':>9} {'total':>6} {'rate':>7}",
        ]
        for bucket in BUCKETS:
            supported, total = self.breakdown[bucket]
            rate = "-" if total == 0 else f"{supported / total:.3f}"
            lines.append(f"{bucket:<10} {supported:>9} {total:>6} {rate:>7}")
        return "\n".join(lines)


def score_verdicts(
    facts: FactSet,
    g: Stsdg,
    verdicts: VerdictSet,
    cfg: ScoringConfig | None = None,
    questions: list[QuestionRecord] | None = None,
) -> FaithfulnessReport:
    """Run the whole raw -> refined -> aggregate pipeline.

    ``questions`` identifies facts that never got a question (those need
    no verdict); every other fact must have one.
    """
    cfg = cfg or ScoringConfig()
    nan_ids: set[int] = set()
    if questions is not None:
        nan_ids = {q.fact_id for q in questions if not q.askable}
    relevant: VerdictSet = {}
    for fact_id in facts.ids():
        if fact_id in nan_ids:
            continue
        if fact_id not in verdicts:
            raise MissingVerdict(fact_id)
        relevant[fact_id] = verdicts[fact_id]

    raw = answers_to_scores(relevant, cfg)
    if cfg.nan_fact_handling is NanFactHandling.ZERO:
        for fact_id in nan_ids:
            raw[fact_id] = 0
    refined = refine_scores(g, raw, cfg)

    invalid: frozenset[int] = frozenset()
    if cfg.invalid_handling is InvalidHandling.EXCLUDE:
        negatives = negative_ids(relevant, cfg)
        invalid = frozenset(g.invalidated_closure(negatives))

    try:
        f_hat = aggregate(refined, invalid)
    except EmptyUniverse:
        f_hat = None

    universe = [fact_id for fact_id in refined if fact_id not in invalid]
    rows = tuple(
        FactScore(f.fact_id, f.category.value, f.subtype,
                  bucket_for(f), refined[f.fact_id])
        for f in facts if f.fact_id in set(universe))
    excluded = tuple(sorted(
        fact_id for fact_id in facts.ids() if fact_id not in set(universe)))
    breakdown = category_breakdown(facts, refined, invalid)
    return FaithfulnessReport(
        f_hat=f_hat,
        n_facts=len(facts),
        n_scored=len(universe),
        n_supported=sum(refined[fact_id] for fact_id in universe),
        excluded=excluded,
        rows=rows,
        breakdown=breakdown,
        config=cfg.to_dict(),
    )
