"""Symbolic scene worlds with exact ground truth.

A :class:`SceneWorld` is a small structured description of a video:
entities with attributes, timestamped relations between them, and
scene-level properties.  Because the world is explicit, every fact
tuple can be checked against it mechanically, which gives the rest of
the pipeline something it almost never has in the wild: a verifier
whose answers are correct by construction.

The module plays four roles.  It checks facts (`verify_fact`), it
generates fact sets and dependency maps from worlds
(`synthesize_facts`), it produces controlled defects on either side of
the pair (`inject_hallucinations` for text, `corrupt_world` for video),
and it provides drop-in backends speaking the same interfaces as the
model-backed gateway so end-to-end runs need no network at all.

`brute_force_refine` / `brute_force_f_hat` recompute scores by direct
recursion over the dependency map, on purpose without touching the
graph or scoring modules, so tests can compare two independent
implementations of the same arithmetic.
"""

from __future__ import annotations

import random
import re
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import dsl
from .scoring import (
    InvalidHandling,
    NanFactHandling,
    Propagation,
    ScoringConfig,
    UnknownAs,
)
from .types import (
    FactCategory,
    FactSet,
    FactTuple,
    QuestionRecord,
    Verdict,
    VideoKind,
    VideoRef,
    VidFaithError,
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_STOPWORDS = frozenset({"a", "an", "the", "of", "s", "and", "is", "are"})
_ORDER_WORDS = frozenset({"before", "after", "while"})
_COUNT_RE = re.compile(r"^==\s*(\d+)$")
_TRUE_PREFIX = "Is this true: "


def _stem(token: str) -> str:
    # light plural folding only; anything smarter needs a lexicon
    if len(token) > 3 and token.endswith("s") and not token.endswith("ss"):
        return token[:-1]
    return token


def text_tokens(text: str) -> frozenset[str]:
    """Normalized token set used for all world-side matching."""
    found = _TOKEN_RE.findall(text.lower())
    return frozenset(_stem(t) for t in found if t not in _STOPWORDS)


# ---------------------------------------------------------------------------
# world model


@dataclass(frozen=True)
class Entity:
    """A visible thing.  ``attributes`` maps a kind ("color") to a value."""

    eid: str
    labels: tuple[str, ...]
    attributes: Mapping[str, str] = field(default_factory=dict)
    part_of: str | None = None
    group_size: int | None = None

    def label_tokens(self) -> frozenset[str]:
        return text_tokens(" ".join(self.labels))

    def pool(self) -> frozenset[str]:
        return self.label_tokens() | text_tokens(
            " ".join(self.attributes.values()))


@dataclass(frozen=True)
class Relation:
    """``subject`` acts on / sits at ``obj``; ``step`` orders happenings."""

    subject: str
    predicate: str
    obj: str
    step: int = 0
    kind: str = "action"


@dataclass(frozen=True)
class SceneWorld:
    entities: tuple[Entity, ...] = ()
    relations: tuple[Relation, ...] = ()
    globals: tuple[str, ...] = ()

    def entity(self, eid: str) -> Entity | None:
        for e in self.entities:
            if e.eid == eid:
                return e
        return None

    def find_entities(self, text: str) -> tuple[Entity, ...]:
        """Entities whose labels cover every token of ``text``."""
        q = text_tokens(text)
        if not q:
            return ()
        return tuple(e for e in self.entities if q <= e.label_tokens())

    def relation_pool(self, rel: Relation) -> frozenset[str]:
        subj = self.entity(rel.subject)
        pool = subj.pool() if subj else text_tokens(rel.subject)
        pool |= text_tokens(rel.predicate)
        obj = self.entity(rel.obj)
        pool |= obj.pool() if obj else text_tokens(rel.obj)
        return pool

    def to_json_dict(self) -> dict:
        return {
            "entities": [
                {
                    "eid": e.eid,
                    "labels": list(e.labels),
                    "attributes": dict(e.attributes),
                    "part_of": e.part_of,
                    "group_size": e.group_size,
                }
                for e in self.entities
            ],
            "relations": [
                {
                    "subject": r.subject,
                    "predicate": r.predicate,
                    "object": r.obj,
                    "step": r.step,
                    "kind": r.kind,
                }
                for r in self.relations
            ],
            "globals": list(self.globals),
        }

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "SceneWorld":
        entities = tuple(
            Entity(
                eid=d["eid"],
                labels=tuple(d["labels"]),
                attributes=dict(d.get("attributes") or {}),
                part_of=d.get("part_of"),
                group_size=d.get("group_size"),
            )
            for d in data.get("entities", ()))
        relations = tuple(
            Relation(
                subject=d["subject"],
                predicate=d["predicate"],
                obj=d["object"],
                step=int(d.get("step", 0)),
                kind=d.get("kind", "action"),
            )
            for d in data.get("relations", ()))
        return cls(entities, relations, tuple(data.get("globals", ())))


def load_world(path: str | Path) -> SceneWorld:
    import json

    with open(path, encoding="utf-8") as fh:
        return SceneWorld.from_json_dict(json.load(fh))


def resolve_world(locator: str) -> SceneWorld:
    """A locator is a file path if it looks like one, else a packaged name."""
    if locator.endswith(".json") or "/" in locator:
        return load_world(locator)
    from . import fixtures

    return SceneWorld.from_json_dict(fixtures.world_json(locator))


def save_world(world: SceneWorld, path: str | Path) -> None:
    import json

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(world.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# fact checking


def verify_fact(world: SceneWorld, fact: FactTuple) -> Verdict:
    """YES or NO.  Unresolvable structure reads as NO, never as an error."""
    try:
        return Verdict.YES if _holds(world, fact) else Verdict.NO
    except Exception:
        return Verdict.NO


def verify_question(world: SceneWorld, question: QuestionRecord,
                    fact: FactTuple | None = None) -> Verdict:
    """Answer a verification question; prefers the fact when supplied."""
    if fact is not None:
        return verify_fact(world, fact)
    parsed = _fact_from_question(question.text)
    if parsed is None:
        return Verdict.UNKNOWN
    return verify_fact(world, parsed)


def _fact_from_question(text: str | None) -> FactTuple | None:
    if not text or not text.startswith(_TRUE_PREFIX):
        return None
    body = text[len(_TRUE_PREFIX):].strip()
    if body.endswith("?"):
        body = body[:-1]
    try:
        return dsl.parse_fact_line(f"1 | {body}")
    except dsl.ParseFailure:
        return None


def _count_expr(args: Sequence[str]) -> tuple[str, int] | None:
    for i, arg in enumerate(args):
        m = _COUNT_RE.match(arg.strip())
        if m:
            label = " ".join(a for j, a in enumerate(args) if j != i)
            return label, int(m.group(1))
    return None


def _holds(world: SceneWorld, fact: FactTuple) -> bool:
    args = [a for a in fact.args if a.strip()]
    if not args:
        return False
    counted = _count_expr(args)
    if counted is not None:
        return _check_count(world, *counted)
    subtype = (fact.subtype or "").lower()
    if "temporal" in subtype or any(
            a.strip().lower() in _ORDER_WORDS for a in args):
        return _check_temporal(world, args)
    cat = fact.category
    if cat is FactCategory.ENTITY:
        return _check_entity(world, args)
    if cat is FactCategory.ATTRIBUTE:
        return _check_attribute(world, args)
    if cat in (FactCategory.RELATION, FactCategory.ACTION):
        return _check_relation(world, args)
    if cat is FactCategory.GLOBAL:
        return _check_global(world, args)
    # event and the open-ended rest share the clause walk
    return _check_event(world, args)


def _check_entity(world: SceneWorld, args: Sequence[str]) -> bool:
    return bool(world.find_entities(" ".join(args)))


def _check_attribute(world: SceneWorld, args: Sequence[str]) -> bool:
    cands = world.find_entities(args[0])
    stated = text_tokens(" ".join(args[1:]))
    if not stated:
        return bool(cands)
    for e in cands:
        if stated <= e.label_tokens():
            return True
        if any(stated <= text_tokens(v) for v in e.attributes.values()):
            return True
    return False


def _check_count(world: SceneWorld, label: str, expected: int) -> bool:
    q = text_tokens(label)
    if not q:
        return False
    total = 0
    matched = False
    for e in world.entities:
        if q <= e.label_tokens():
            matched = True
            total += e.group_size if e.group_size is not None else 1
    return matched and total == expected


def _check_relation(world: SceneWorld, args: Sequence[str]) -> bool:
    cand_ids = {e.eid for e in world.find_entities(args[0])}
    subj_q = text_tokens(args[0])
    rest = [text_tokens(a) for a in args[1:]]
    for rel in world.relations:
        if rel.subject in cand_ids:
            ok = True
        elif subj_q and subj_q <= text_tokens(rel.subject):
            ok = True
        else:
            ok = False
        if not ok:
            continue
        pool = world.relation_pool(rel)
        if all(q <= pool for q in rest):
            return True
    return False


def _check_temporal(world: SceneWorld, args: Sequence[str]) -> bool:
    pivot = None
    for i, arg in enumerate(args):
        if arg.strip().lower() in _ORDER_WORDS:
            pivot = i
            break
    if pivot is None or pivot == 0 or pivot == len(args) - 1:
        return False
    word = args[pivot].strip().lower()
    left = text_tokens(" ".join(args[:pivot]))
    right = text_tokens(" ".join(args[pivot + 1:]))
    for first in world.relations:
        if not left <= world.relation_pool(first):
            continue
        for second in world.relations:
            if second is first:
                continue
            if not right <= world.relation_pool(second):
                continue
            if word == "before" and first.step < second.step:
                return True
            if word == "after" and first.step > second.step:
                return True
            if word == "while" and first.step == second.step:
                return True
    return False


def _check_global(world: SceneWorld, args: Sequence[str]) -> bool:
    q = text_tokens(" ".join(args))
    if not q:
        return False
    return any(q <= text_tokens(g) for g in world.globals)


def _check_event(world: SceneWorld, args: Sequence[str]) -> bool:
    """Left-to-right clause binding.

    Each argument either narrows the entities of the clause under
    discussion (an attribute value), opens a new clause (an entity
    reference), checks the clause's cardinality (a count expression),
    or must be witnessed by a relation linking the open clauses.  The
    order matters: narrowing is tried first, so a value that the
    current clause cannot absorb and that names no entity makes the
    whole fact false instead of silently starting a clause of its own.
    """
    clauses: list[list[Entity]] = []
    for raw in args:
        arg = raw.strip()
        m = _COUNT_RE.match(arg)
        if m:
            if not clauses:
                return False
            total = sum(e.group_size or 1 for e in clauses[-1])
            if total != int(m.group(1)):
                return False
            continue
        q = text_tokens(arg)
        if not q:
            continue
        if clauses:
            narrowed = [
                e for e in clauses[-1]
                if any(q <= text_tokens(v) for v in e.attributes.values())
            ]
            if narrowed:
                clauses[-1] = narrowed
                continue
        opened = [e for e in world.entities if q <= e.label_tokens()]
        if opened:
            clauses.append(opened)
            continue
        if not _link_clauses(world, clauses, q):
            return False
    return bool(clauses)


def _link_clauses(world: SceneWorld, clauses: list[list[Entity]],
                  q: frozenset[str]) -> bool:
    if not clauses:
        return False
    if len(clauses) >= 2:
        left = {e.eid for e in clauses[-2]}
        right = {e.eid for e in clauses[-1]}
        for rel in world.relations:
            if not q <= text_tokens(rel.predicate):
                continue
            if rel.subject in left and rel.obj in right:
                return True
            if rel.subject in right and rel.obj in left:
                return True
        return False
    ids = {e.eid for e in clauses[0]}
    for rel in world.relations:
        if rel.subject not in ids:
            continue
        obj = world.entity(rel.obj)
        pool = text_tokens(rel.predicate)
        pool |= obj.pool() if obj else text_tokens(rel.obj)
        if q <= pool:
            return True
    return False


# ---------------------------------------------------------------------------
# synthesis


def synthesize_facts(
        world: SceneWorld,
        seed: int = 0) -> tuple[FactSet, dict[int, tuple[int, ...]]]:
    """Derive a fact set plus dependency map that the world satisfies.

    Emission order is fixed: entities, counts, attributes, relations,
    temporal orderings, composite events, scene globals.  The seed only
    thins out temporal and event candidates when a world offers more
    than a handful; everything kept is true in the world.
    """
    rng = random.Random(seed)
    facts: list[FactTuple] = []
    deps: dict[int, tuple[int, ...]] = {}

    def add(category: FactCategory, subtype: str | None,
            args: tuple[str, ...], parents: Iterable[int]) -> int:
        fid = len(facts) + 1
        facts.append(FactTuple(fid, category, subtype, args))
        deps[fid] = tuple(sorted(set(parents)))
        return fid

    entity_fid: dict[str, int] = {}
    for e in world.entities:
        parents: tuple[int, ...] = ()
        subtype = "whole"
        if e.part_of is not None:
            subtype = "part"
            if e.part_of in entity_fid:
                parents = (entity_fid[e.part_of],)
        entity_fid[e.eid] = add(
            FactCategory.ENTITY, subtype, (e.labels[0],), parents)

    for e in world.entities:
        if e.group_size is not None:
            add(FactCategory.OTHER, "count",
                (e.labels[0], f"=={e.group_size}"), (entity_fid[e.eid],))

    first_attr: dict[str, tuple[int, str]] = {}
    for e in world.entities:
        for kind in sorted(e.attributes):
            fid = add(FactCategory.ATTRIBUTE, kind,
                      (e.labels[0], e.attributes[kind]),
                      (entity_fid[e.eid],))
            first_attr.setdefault(e.eid, (fid, e.attributes[kind]))

    rel_fid: dict[int, int] = {}
    for i, rel in enumerate(world.relations):
        obj_entity = world.entity(rel.obj)
        obj_label = obj_entity.labels[0] if obj_entity else rel.obj
        parents = [entity_fid[rel.subject]] if rel.subject in entity_fid else []
        if obj_entity and obj_entity.eid in entity_fid:
            parents.append(entity_fid[obj_entity.eid])
        if rel.kind == "spatial":
            rel_fid[i] = add(FactCategory.RELATION, "spatial",
                             (_subject_label(world, rel), obj_label,
                              rel.predicate), parents)
        else:
            rel_fid[i] = add(FactCategory.ACTION, None,
                             (_subject_label(world, rel), obj_label,
                              rel.predicate), parents)

    ordered = sorted(range(len(world.relations)),
                     key=lambda i: (world.relations[i].step, i))
    pairs = [
        (ordered[k], ordered[k + 1])
        for k in range(len(ordered) - 1)
        if world.relations[ordered[k]].step
        < world.relations[ordered[k + 1]].step
    ]
    if len(pairs) > 2:
        pairs = sorted(rng.sample(pairs, 2))
    for i, j in pairs:
        first, second = world.relations[i], world.relations[j]
        add(FactCategory.RELATION, "temporal",
            (_subject_label(world, first), first.predicate, "before",
             _subject_label(world, second), second.predicate),
            (rel_fid[i], rel_fid[j]))

    eligible = [e for e in world.entities if e.eid in first_attr]
    couples = list(zip(eligible, eligible[1:]))
    if len(couples) > 2:
        couples = couples[:1] + rng.sample(couples[1:], 1)
    for a, b in couples:
        fid_a, value_a = first_attr[a.eid]
        fid_b, value_b = first_attr[b.eid]
        args = [a.labels[0], value_a, b.labels[0], value_b]
        parents = [fid_a, fid_b]
        for i, rel in enumerate(world.relations):
            endpoints = {rel.subject, rel.obj}
            if endpoints == {a.eid, b.eid}:
                args.append(rel.predicate)
                parents.append(rel_fid[i])
                break
        add(FactCategory.EVENT, "binding", tuple(args), parents)

    for g in world.globals:
        add(FactCategory.GLOBAL, None, (g,), ())

    return FactSet(facts), deps


def _subject_label(world: SceneWorld, rel: Relation) -> str:
    subj = world.entity(rel.subject)
    return subj.labels[0] if subj else rel.subject


# ---------------------------------------------------------------------------
# world generators


_NOUNS = ("man", "woman", "dog", "cat", "car", "tree", "door", "table",
          "bird", "boat", "house", "child", "horse", "cup", "ball",
          "chair", "lamp", "book", "train", "flower")
_PARTS = {"man": "hat", "woman": "scarf", "dog": "collar", "car": "wheel",
          "door": "handle", "house": "roof", "tree": "branch",
          "horse": "saddle", "child": "backpack", "boat": "sail"}
_KIND_VALUES = {
    "color": ("red", "blue", "green", "yellow", "purple", "white"),
    "state": ("happy", "sad", "open", "closed", "shiny", "calm"),
    "material": ("wooden", "metal", "plastic", "glass", "stone"),
    "size": ("small", "large", "tiny", "huge"),
}
_PREDICATES = {
    "action": ("holds", "watches", "follows", "carries", "approaches"),
    "spatial": ("on", "beside", "under", "behind", "near"),
}
_GLOBAL_STYLES = ("digital art", "black and white", "aerial view",
                  "oil painting", "watercolor", "night scene")
_GROUP_LABELS = ("balloons", "cones", "pigeons", "lanterns")
_PHANTOM_NOUNS = ("robot", "umbrella", "kite", "tiger", "violin")


def random_world(seed: int, min_entities: int = 2,
                 max_entities: int = 5) -> SceneWorld:
    """A world whose synthesized facts all verify as yes.

    The vocabularies are kept pairwise token-disjoint (nouns, values,
    predicates, styles, group labels) so matching never crosses wires.
    """
    rng = random.Random(seed)
    entities: list[Entity] = []
    for noun in rng.sample(_NOUNS, rng.randint(min_entities, max_entities)):
        kinds = rng.sample(sorted(_KIND_VALUES), rng.randint(1, 2))
        attrs = {k: rng.choice(_KIND_VALUES[k]) for k in kinds}
        entities.append(Entity(eid=noun, labels=(noun,), attributes=attrs))
        if noun in _PARTS and rng.random() < 0.35:
            part = _PARTS[noun]
            entities.append(Entity(
                eid=f"{noun}-{part}",
                labels=(f"{noun}'s {part}", part),
                attributes={"color": rng.choice(_KIND_VALUES["color"])},
                part_of=noun,
            ))
    if rng.random() < 0.35:
        label = rng.choice(_GROUP_LABELS)
        entities.append(Entity(eid=label, labels=(label,), attributes={},
                               group_size=rng.randint(2, 5)))
    wholes = [e for e in entities
              if e.part_of is None and e.group_size is None]
    relations: list[Relation] = []
    if len(wholes) >= 2:
        for step in range(rng.randint(0, min(3, len(wholes)))):
            a, b = rng.sample(wholes, 2)
            kind = rng.choice(("action", "spatial"))
            relations.append(Relation(
                subject=a.eid, predicate=rng.choice(_PREDICATES[kind]),
                obj=b.eid, step=step, kind=kind))
    style_count = rng.randint(0, 2)
    styles = tuple(rng.sample(_GLOBAL_STYLES, style_count))
    return SceneWorld(tuple(entities), tuple(relations), styles)


def world_from_facts(facts: FactSet) -> SceneWorld:
    """Best-effort world in which the given facts mostly hold.

    Used to pair corpus fact sets with a checkable video stand-in; the
    reconstruction is lossy for free-form events, so callers should
    expect completion, not perfection.
    """
    entities: list[dict] = []
    relations: list[Relation] = []
    globals_: list[str] = []

    def find(text: str) -> dict | None:
        q = text_tokens(text)
        if not q:
            return None
        for ent in entities:
            if q <= text_tokens(" ".join(ent["labels"])):
                return ent
        return None

    def find_or_create(text: str) -> dict:
        ent = find(text)
        if ent is None:
            ent = {"eid": f"e{len(entities) + 1}", "labels": [text],
                   "attributes": {}, "part_of": None, "group_size": None}
            entities.append(ent)
        return ent

    for fact in facts:
        if fact.category is FactCategory.ENTITY:
            label = " ".join(fact.args)
            mine = text_tokens(label)
            owner = None
            for ent in entities:
                theirs = text_tokens(" ".join(ent["labels"]))
                if theirs < mine:
                    owner = ent["eid"]
            ent = {"eid": f"e{len(entities) + 1}", "labels": [label],
                   "attributes": {}, "part_of": owner, "group_size": None}
            entities.append(ent)

    step = 0
    for fact in facts:
        args = [a for a in fact.args if a.strip()]
        if not args or fact.category is FactCategory.ENTITY:
            continue
        counted = _count_expr(args)
        if counted is not None:
            label, k = counted
            find_or_create(label)["group_size"] = k
            continue
        pivot = next((i for i, a in enumerate(args)
                      if a.strip().lower() in _ORDER_WORDS), None)
        if pivot is not None:
            word = args[pivot].strip().lower()
            if word == "after":
                offsets = (1, 0)
            elif word == "before":
                offsets = (0, 1)
            else:
                offsets = (0, 0)
            for side, offset in ((args[:pivot], offsets[0]),
                                 (args[pivot + 1:], offsets[1])):
                if not side:
                    continue
                subject = find_or_create(side[0])
                predicate = " ".join(side[1:]) or "happens"
                relations.append(Relation(
                    subject=subject["eid"], predicate=predicate,
                    obj=side[-1] if len(side) > 1 else predicate,
                    step=step + offset, kind="action"))
            step += 2
            continue
        if fact.category in (FactCategory.RELATION, FactCategory.ACTION):
            subject = find_or_create(args[0])
            rest = args[1:]
            if not rest:
                continue
            obj_arg = next((a for a in rest if find(a) is not None), rest[0])
            predicate = " ".join(a for a in rest if a != obj_arg) or obj_arg
            obj = find(obj_arg)
            relations.append(Relation(
                subject=subject["eid"], predicate=predicate,
                obj=obj["eid"] if obj else obj_arg, step=step,
                kind="spatial" if fact.category is FactCategory.RELATION
                else "action"))
            step += 1
            continue
        if fact.category is FactCategory.GLOBAL:
            globals_.append(" ".join(args))
            continue
        if fact.category is FactCategory.ATTRIBUTE and len(args) >= 2:
            ent = find_or_create(args[0])
            kind = fact.subtype_key() or f"attr{fact.fact_id}"
            if kind in ent["attributes"]:
                kind = f"{kind}-{fact.fact_id}"
            ent["attributes"][kind] = " ".join(args[1:])

    return SceneWorld(
        tuple(Entity(eid=e["eid"], labels=tuple(e["labels"]),
                     attributes=e["attributes"], part_of=e["part_of"],
                     group_size=e["group_size"]) for e in entities),
        tuple(relations),
        tuple(globals_),
    )


# ---------------------------------------------------------------------------
# controlled defects


class HallucinationKind(Enum):
    PHANTOM_ENTITY = "phantom_entity"
    WRONG_ATTRIBUTE = "wrong_attribute"
    SWAPPED_RELATION = "swapped_relation"
    WRONG_ORDER = "wrong_order"
    WRONG_COUNT = "wrong_count"
    CROSS_BINDING = "cross_binding"


@dataclass(frozen=True)
class HallucinationSpec:
    kind: HallucinationKind
    seed: int = 0
    count: int = 1


@dataclass(frozen=True)
class InjectionRecord:
    kind: HallucinationKind
    fact_ids: tuple[int, ...]
    description: str


class InsufficientSites(VidFaithError):
    """The fact set offers fewer usable mutation sites than requested."""

    def __init__(self, label: str, needed: int, found: int):
        super().__init__(
            f"{label}: needed {needed} site(s), found {found}")
        self.label = label
        self.needed = needed
        self.found = found


def inject_hallucinations(
    facts: FactSet,
    deps: Mapping[int, tuple[int, ...]],
    world: SceneWorld,
    spec: HallucinationSpec,
) -> tuple[FactSet, dict[int, tuple[int, ...]], tuple[InjectionRecord, ...]]:
    """Plant defects of one kind into a fact set that the world satisfies.

    Every mutation is validated against the world before being kept: the
    touched fact must verify yes beforehand and no afterwards, so the
    returned log is also the exact ground truth of what went wrong.
    """
    rng = random.Random(spec.seed)
    working: dict[int, FactTuple] = {f.fact_id: f for f in facts}
    order = [f.fact_id for f in facts]
    new_deps = {fid: tuple(parents) for fid, parents in deps.items()}
    records: list[InjectionRecord] = []

    def flips(before: FactTuple, after: FactTuple) -> bool:
        return (verify_fact(world, before) is Verdict.YES
                and verify_fact(world, after) is Verdict.NO)

    if spec.kind is HallucinationKind.PHANTOM_ENTITY:
        nouns = [n for n in _NOUNS + _PHANTOM_NOUNS
                 if not world.find_entities(n)]
        rng.shuffle(nouns)
        usable = nouns[:spec.count]
        if len(usable) < spec.count:
            raise InsufficientSites(spec.kind.value, spec.count, len(usable))
        for noun in usable:
            nid = max(order) + 1
            aid = nid + 1
            value = rng.choice(_KIND_VALUES["color"]
                               + _KIND_VALUES["state"])
            ghost = FactTuple(nid, FactCategory.ENTITY, "whole", (noun,))
            shadow = FactTuple(aid, FactCategory.ATTRIBUTE, "state",
                               (noun, value))
            working[nid] = ghost
            working[aid] = shadow
            order += [nid, aid]
            new_deps[nid] = ()
            new_deps[aid] = (nid,)
            records.append(InjectionRecord(
                spec.kind, (nid, aid), f"added absent {noun!r}"))
        return (FactSet(working[fid] for fid in order), new_deps,
                tuple(records))

    def mutate(fact: FactTuple) -> FactTuple | None:
        if spec.kind is HallucinationKind.WRONG_ATTRIBUTE:
            if fact.category is not FactCategory.ATTRIBUTE:
                return None
            if len(fact.args) < 2 or _count_expr(fact.args):
                return None
            vocab = [v for vals in _KIND_VALUES.values() for v in vals]
            rng.shuffle(vocab)
            for value in vocab:
                if value == fact.args[-1]:
                    continue
                changed = replace(fact, args=(*fact.args[:-1], value))
                if flips(fact, changed):
                    return changed
            return None
        if spec.kind is HallucinationKind.SWAPPED_RELATION:
            if fact.category not in (FactCategory.RELATION,
                                     FactCategory.ACTION):
                return None
            if _count_expr(fact.args) or len(fact.args) < 2:
                return None
            if any(a.strip().lower() in _ORDER_WORDS for a in fact.args):
                return None
            for j in range(1, len(fact.args)):
                if not world.find_entities(fact.args[j]):
                    continue
                swapped = list(fact.args)
                swapped[0], swapped[j] = swapped[j], swapped[0]
                changed = replace(fact, args=tuple(swapped))
                if flips(fact, changed):
                    return changed
            return None
        if spec.kind is HallucinationKind.WRONG_ORDER:
            flipped = {"before": "after", "after": "before"}
            for j, arg in enumerate(fact.args):
                word = arg.strip().lower()
                if word in flipped:
                    swapped = list(fact.args)
                    swapped[j] = flipped[word]
                    changed = replace(fact, args=tuple(swapped))
                    if flips(fact, changed):
                        return changed
            return None
        if spec.kind is HallucinationKind.WRONG_COUNT:
            counted = _count_expr(fact.args)
            if counted is None:
                return None
            changed = replace(fact, args=tuple(
                f"=={counted[1] + 1}" if _COUNT_RE.match(a.strip()) else a
                for a in fact.args))
            return changed if flips(fact, changed) else None
        if spec.kind is HallucinationKind.CROSS_BINDING:
            if fact.category is not FactCategory.EVENT:
                return None
            if len(fact.args) < 4:
                return None
            if any(a.strip().lower() in _ORDER_WORDS for a in fact.args):
                return None
            for j in range(2, len(fact.args)):
                if not world.find_entities(fact.args[j]):
                    continue
                merged = tuple(a for k, a in enumerate(fact.args) if k != j)
                changed = replace(fact, args=merged)
                if flips(fact, changed):
                    return changed
            return None
        return None

    sites = [working[fid] for fid in order]
    rng.shuffle(sites)
    for fact in sites:
        if len(records) == spec.count:
            break
        changed = mutate(fact)
        if changed is None:
            continue
        working[fact.fact_id] = changed
        records.append(InjectionRecord(
            spec.kind, (fact.fact_id,),
            f"{dsl.render_fact_body(fact)} -> {dsl.render_fact_body(changed)}"))
    if len(records) < spec.count:
        raise InsufficientSites(spec.kind.value, spec.count, len(records))
    return (FactSet(working[fid] for fid in order), new_deps,
            tuple(records))


def applicable_kinds(world: SceneWorld, facts: FactSet,
                     deps: Mapping[int, tuple[int, ...]],
                     seed: int = 0) -> tuple[HallucinationKind, ...]:
    """The defect kinds this particular fact set has room for."""
    usable = []
    for kind in HallucinationKind:
        try:
            inject_hallucinations(facts, deps, world,
                                  HallucinationSpec(kind, seed, 1))
        except InsufficientSites:
            continue
        usable.append(kind)
    return tuple(usable)


@dataclass(frozen=True)
class CorruptionRecord:
    scope: str
    target: str
    description: str


def corrupt_world(world: SceneWorld, seed: int = 0,
                  count: int = 1) -> tuple[SceneWorld,
                                           tuple[CorruptionRecord, ...]]:
    """Damage the world so some of its own synthesized facts stop holding.

    Each corruption is chosen so the newly failing root facts are ones a
    single editing instruction can repair: an attribute value, a group
    count, or a scene global.  Corruptions that would flip nothing are
    discarded.
    """
    rng = random.Random(seed)
    baseline, deps = synthesize_facts(world, seed)
    sites: list[tuple[str, str]] = []
    for e in world.entities:
        for kind in sorted(e.attributes):
            sites.append(("attribute", f"{e.eid}.{kind}"))
        if e.group_size is not None:
            sites.append(("count", e.eid))
    for g in world.globals:
        sites.append(("global", g))
    rng.shuffle(sites)

    current = world
    records: list[CorruptionRecord] = []
    for scope, target in sites:
        if len(records) == count:
            break
        candidate = _apply_corruption(current, scope, target, rng)
        if candidate is None:
            continue
        damaged, description = candidate
        flipped = [
            f for f in baseline
            if verify_fact(current, f) is Verdict.YES
            and verify_fact(damaged, f) is Verdict.NO
        ]
        if not flipped:
            continue
        current = damaged
        records.append(CorruptionRecord(scope, target, description))
    if len(records) < count:
        raise InsufficientSites("corruption", count, len(records))
    return current, tuple(records)


def _apply_corruption(world: SceneWorld, scope: str, target: str,
                      rng: random.Random) -> tuple[SceneWorld, str] | None:
    if scope == "attribute":
        eid, kind = target.rsplit(".", 1)
        e = world.entity(eid)
        if e is None or kind not in e.attributes:
            return None
        vocab = list(_KIND_VALUES.get(kind, ()))
        rng.shuffle(vocab)
        for value in vocab:
            if value == e.attributes[kind]:
                continue
            attrs = dict(e.attributes)
            old = attrs[kind]
            attrs[kind] = value
            damaged = replace(world, entities=tuple(
                replace(x, attributes=attrs) if x.eid == eid else x
                for x in world.entities))
            return damaged, f"{kind}: {old} -> {value}"
        return None
    if scope == "count":
        e = world.entity(target)
        if e is None or e.group_size is None:
            return None
        damaged = replace(world, entities=tuple(
            replace(x, group_size=x.group_size + 1) if x.eid == target else x
            for x in world.entities))
        return damaged, f"group {e.group_size} -> {e.group_size + 1}"
    if scope == "global":
        if target not in world.globals:
            return None
        damaged = replace(world, globals=tuple(
            g for g in world.globals if g != target))
        return damaged, f"dropped {target!r}"
    return None


# ---------------------------------------------------------------------------
# independent scorer


def brute_force_refine(deps: Mapping[int, tuple[int, ...]],
                       raw: Mapping[int, int],
                       cfg: ScoringConfig) -> dict[int, int]:
    """Refined scores by plain recursion over the dependency map."""
    memo: dict[int, int] = {}
    active: set[int] = set()

    def value(fid: int) -> int:
        if fid in memo:
            return memo[fid]
        if fid in active:
            raise ValueError(f"dependency cycle through {fid}")
        active.add(fid)
        score = raw.get(fid, 1)
        for parent in deps.get(fid, ()):
            if cfg.propagation is Propagation.TRANSITIVE:
                score *= value(parent)
            else:
                score *= raw.get(parent, 1)
        active.discard(fid)
        memo[fid] = score
        return score

    return {fid: value(fid) for fid in raw}


def brute_force_f_hat(deps: Mapping[int, tuple[int, ...]],
                      verdicts: Mapping[int, Verdict],
                      cfg: ScoringConfig | None = None,
                      nan_ids: frozenset[int] = frozenset()) -> float | None:
    cfg = cfg or ScoringConfig()
    raw: dict[int, int] = {}
    for fid, verdict in verdicts.items():
        if verdict is Verdict.YES:
            raw[fid] = 1
        elif verdict in (Verdict.NO, Verdict.SKIPPED):
            raw[fid] = 0
        elif cfg.unknown_as is UnknownAs.NO:
            raw[fid] = 0
    for fid in nan_ids:
        if cfg.nan_fact_handling is NanFactHandling.ZERO:
            raw[fid] = 0
        else:
            raw.pop(fid, None)
    negatives = {
        fid for fid, verdict in verdicts.items()
        if verdict is Verdict.NO
        or (verdict is Verdict.UNKNOWN and cfg.unknown_as is UnknownAs.NO)
    }

    tainted: dict[int, bool] = {}

    def has_negative_ancestor(fid: int, trail: frozenset[int]) -> bool:
        if fid in tainted:
            return tainted[fid]
        if fid in trail:
            raise ValueError(f"dependency cycle through {fid}")
        hit = False
        for parent in deps.get(fid, ()):
            if parent in negatives or has_negative_ancestor(
                    parent, trail | {fid}):
                hit = True
                break
        tainted[fid] = hit
        return hit

    refined = brute_force_refine(deps, raw, cfg)
    universe = [
        fid for fid in raw
        if cfg.invalid_handling is InvalidHandling.ZERO
        or fid in negatives
        or not has_negative_ancestor(fid, frozenset())
    ]
    if not universe:
        return None
    return sum(refined[fid] for fid in universe) / len(universe)


def brute_force_score(world: SceneWorld, facts: FactSet,
                      deps: Mapping[int, tuple[int, ...]],
                      cfg: ScoringConfig | None = None) -> float | None:
    verdicts = {f.fact_id: verify_fact(world, f) for f in facts}
    return brute_force_f_hat(deps, verdicts, cfg)


# ---------------------------------------------------------------------------
# dependency inference


def infer_dependencies(facts: FactSet) -> dict[int, tuple[int, ...]]:
    """Rule-based dependency map over an arbitrary fact set.

    Attributes hang off the entity they describe, relations off both
    endpoints, temporal orderings off the relations they sequence, and
    composite events off whichever attribute or relation facts their
    arguments restate.  The rules only ever point at coarser facts, so
    the result is acyclic by construction.
    """
    entity_rows = [
        (f.fact_id, text_tokens(" ".join(f.args)))
        for f in facts if f.category is FactCategory.ENTITY
    ]
    plain_relations = [
        f for f in facts
        if f.category in (FactCategory.RELATION, FactCategory.ACTION)
        and not any(a.strip().lower() in _ORDER_WORDS for a in f.args)
    ]
    attr_rows = [
        f for f in facts
        if f.category is FactCategory.ATTRIBUTE and not _count_expr(f.args)
    ]

    def best_entity(text: str) -> int | None:
        q = text_tokens(text)
        if not q:
            return None
        scored = []
        for fid, toks in entity_rows:
            overlap = len(q & toks)
            if overlap:
                scored.append((-overlap, len(toks - q), fid))
        if not scored:
            return None
        return min(scored)[2]

    def best_relation(text: str) -> int | None:
        q = text_tokens(text)
        if not q:
            return None
        scored = []
        for f in plain_relations:
            toks = text_tokens(" ".join(f.args))
            overlap = len(q & toks)
            if overlap:
                scored.append((-overlap, len(toks - q), f.fact_id))
        if not scored:
            return None
        return min(scored)[2]

    deps: dict[int, tuple[int, ...]] = {}
    for fact in facts:
        fid = fact.fact_id
        args = [a for a in fact.args if a.strip()]
        parents: list[int] = []
        pivot = next((i for i, a in enumerate(args)
                      if a.strip().lower() in _ORDER_WORDS), None)
        counted = _count_expr(args)
        if fact.category is FactCategory.ENTITY:
            mine = text_tokens(" ".join(args))
            parents = [oid for oid, toks in entity_rows
                       if oid != fid and toks and toks < mine]
        elif fact.category is FactCategory.GLOBAL:
            parents = []
        elif counted is not None:
            hit = best_entity(counted[0])
            parents = [hit] if hit is not None else []
        elif pivot is not None:
            for side in (args[:pivot], args[pivot + 1:]):
                hit = best_relation(" ".join(side))
                if hit is not None:
                    parents.append(hit)
        elif fact.category in (FactCategory.RELATION, FactCategory.ACTION):
            for arg in args:
                hit = best_entity(arg)
                if hit is not None:
                    parents.append(hit)
        elif fact.category is FactCategory.EVENT:
            ev_toks = text_tokens(" ".join(args))
            for other in attr_rows + plain_relations:
                toks = text_tokens(" ".join(other.args))
                if other.fact_id != fid and toks and toks <= ev_toks:
                    parents.append(other.fact_id)
            if not parents:
                for arg in args:
                    hit = best_entity(arg)
                    if hit is not None:
                        parents.append(hit)
        elif fact.category is FactCategory.ATTRIBUTE and args:
            hit = best_entity(args[0])
            parents = [hit] if hit is not None else []
        deps[fid] = tuple(sorted({p for p in parents if p != fid}))
    return deps


# ---------------------------------------------------------------------------
# drop-in backends


def _last_text(request) -> str:
    message = request.messages[-1]
    content = message["content"] if isinstance(message, Mapping) \
        else message.content
    if isinstance(content, str):
        return content
    return "\n".join(part.get("text", "") for part in content
                     if isinstance(part, Mapping))


def _final_input_text(prompt: str) -> str:
    idx = prompt.rfind("input:")
    body = prompt[idx + len("input:"):] if idx >= 0 else prompt
    cut = body.rfind("output:")
    if cut >= 0:
        body = body[:cut]
    return body.strip()


def _facts_in(text: str) -> list[FactTuple]:
    facts: list[FactTuple] = []
    seen: set[int] = set()
    for line_no, line in dsl.logical_lines(text):
        try:
            fact = dsl.parse_fact_line(line, line_no)
        except dsl.ParseFailure:
            continue
        if fact.fact_id not in seen:
            seen.add(fact.fact_id)
            facts.append(fact)
    return facts


class OracleExtractor:
    """Echoes the tuple block embedded in the request's final input."""

    def complete(self, request) -> str:
        return _final_input_text(_last_text(request))


class OracleQuestioner:
    def complete(self, request) -> str:
        facts = _facts_in(_final_input_text(_last_text(request)))
        return "\n".join(
            f"{f.fact_id} | {_TRUE_PREFIX}{dsl.render_fact_body(f)}?"
            for f in facts)


class OracleDependency:
    def complete(self, request) -> str:
        facts = _facts_in(_final_input_text(_last_text(request)))
        if not facts:
            return ""
        return dsl.render_dependency_block(
            infer_dependencies(FactSet(facts)))


class OracleVerifier:
    """Answers verification questions by checking the scene world itself.

    The video reference must point at a world: either a path to a world
    JSON file or the name of a packaged one.  A fixed world can also be
    supplied up front, which then wins over whatever the reference says.
    """

    def __init__(self, world: SceneWorld | None = None):
        self._world = world
        self._loaded: dict[str, SceneWorld] = {}

    def answer(self, video: VideoRef | None, question: str | None,
               fact: FactTuple | None = None) -> str:
        world = self._resolve(video)
        if world is None:
            return "unknown"
        if fact is None:
            fact = _fact_from_question(question)
        if fact is None:
            return "unknown"
        return "yes" if verify_fact(world, fact) is Verdict.YES else "no"

    def _resolve(self, video: VideoRef | None) -> SceneWorld | None:
        if self._world is not None:
            return self._world
        if video is None:
            return None
        locator = video.locator
        if locator not in self._loaded:
            try:
                self._loaded[locator] = resolve_world(locator)
            except (OSError, KeyError, ValueError, VidFaithError):
                return None
        return self._loaded[locator]


_QA_LINE = re.compile(r"^Q: (?P<q>.*?) A: (?P<a>yes|no|uncertain)$",
                      re.MULTILINE)


def _qa_from_prompt(prompt: str) -> list[tuple[str, str]]:
    return [(m.group("q"), m.group("a"))
            for m in _QA_LINE.finditer(prompt)]


def _original_from_prompt(prompt: str) -> str:
    lines = prompt.splitlines()
    try:
        start = lines.index("original response:") + 1
        stop = lines.index("verification results:")
    except ValueError:
        return prompt
    return "\n".join(lines[start:stop]).strip()


class OracleTextCorrector:
    """Rewrites a tuple-block response by deleting the refuted lines.

    Descendants of a deleted fact go with it; a sentence about the color
    of a thing that is not there has no business surviving the rewrite.
    """

    def complete(self, request) -> str:
        prompt = _last_text(request)
        original = _original_from_prompt(prompt)
        refuted = {
            q[len(_TRUE_PREFIX):].rstrip("?").strip()
            for q, a in _qa_from_prompt(prompt)
            if a == "no" and q.startswith(_TRUE_PREFIX)
        }
        facts = _facts_in(original)
        if not facts or not refuted:
            return original
        doomed = {f.fact_id for f in facts
                  if dsl.render_fact_body(f) in refuted}
        if not doomed:
            return original
        children: dict[int, list[int]] = {}
        for fid, parents in infer_dependencies(FactSet(facts)).items():
            for parent in parents:
                children.setdefault(parent, []).append(fid)
        frontier = list(doomed)
        while frontier:
            for child in children.get(frontier.pop(), ()):
                if child not in doomed:
                    doomed.add(child)
                    frontier.append(child)
        kept = [f for f in facts if f.fact_id not in doomed]
        return dsl.render_fact_block(kept)


class OracleEditInstructor:
    """Turns refuted facts into one canonical imperative per line."""

    def complete(self, request) -> str:
        prompt = _last_text(request)
        lines = []
        for q, a in _qa_from_prompt(prompt):
            if a != "no":
                continue
            fact = _fact_from_question(q if q.endswith("?") else q + "?")
            if fact is None:
                continue
            lines.append(_imperative_for(fact))
        return "\n".join(lines) if lines else "no change."


def _imperative_for(fact: FactTuple) -> str:
    args = [a for a in fact.args if a.strip()]
    counted = _count_expr(args)
    if counted is not None:
        return f"set the count of {counted[0]} to {counted[1]}."
    if fact.category is FactCategory.ATTRIBUTE and len(args) >= 2:
        value = " ".join(args[1:])
        if fact.subtype:
            return f"change the {fact.subtype} of the {args[0]} to {value}."
        return f"change the {args[0]} to {value}."
    if fact.category is FactCategory.GLOBAL:
        return f"add a {' '.join(args)} style."
    if fact.category is FactCategory.ENTITY:
        return f"add a {' '.join(args)}."
    return f"fix: {dsl.render_fact_body(fact)}."


class EditorError(VidFaithError):
    """The editor was handed an instruction it cannot interpret."""


_CHANGE_RE = re.compile(
    r"^change the (?:(?P<kind>[\w -]+?) of the )?(?P<ent>.+?) "
    r"to (?P<val>.+?)\.?$", re.IGNORECASE)
_COUNT_EDIT_RE = re.compile(
    r"^set the count of (?P<ent>.+?) to (?P<k>\d+)\.?$", re.IGNORECASE)
_ADD_STYLE_RE = re.compile(r"^add a (?P<what>.+?) style\.?$", re.IGNORECASE)
_ADD_RE = re.compile(r"^add a (?P<what>.+?)\.?$", re.IGNORECASE)


class SceneWorldEditor:
    """Applies canonical imperatives to a world file and writes a new one."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self._revision = 0
        # many records may edit concurrently; each must get its own file
        self._lock = threading.Lock()

    def edit(self, video: VideoRef, instruction: str) -> VideoRef:
        try:
            world = resolve_world(video.locator)
        except (OSError, KeyError, ValueError) as exc:
            raise EditorError(
                f"cannot load world {video.locator!r}: {exc}") from exc
        for line in instruction.splitlines():
            line = line.strip()
            if not line or line.lower() == "no change.":
                continue
            world = _apply_edit(world, line)
        with self._lock:
            self._revision += 1
            revision = self._revision
        path = self.out_dir / f"world_{revision:03d}.json"
        save_world(world, path)
        return VideoRef(VideoKind.SCENE_WORLD, str(path))


def _edit_target(world: SceneWorld, text: str) -> Entity:
    q = text_tokens(text)
    best: tuple[int, int, Entity] | None = None
    for i, e in enumerate(world.entities):
        overlap = len(q & e.label_tokens())
        if overlap and (best is None or overlap > best[0]):
            best = (overlap, i, e)
    if best is None:
        raise EditorError(f"no entity matches {text!r}")
    return best[2]


def _apply_edit(world: SceneWorld, line: str) -> SceneWorld:
    m = _COUNT_EDIT_RE.match(line)
    if m:
        target = _edit_target(world, m.group("ent"))
        return replace(world, entities=tuple(
            replace(e, group_size=int(m.group("k")))
            if e.eid == target.eid else e for e in world.entities))
    m = _CHANGE_RE.match(line)
    if m:
        target = _edit_target(world, m.group("ent"))
        kind = m.group("kind")
        if kind is None:
            if len(target.attributes) == 1:
                kind = next(iter(target.attributes))
            else:
                raise EditorError(f"ambiguous attribute in {line!r}")
        attrs = dict(target.attributes)
        attrs[kind.strip().lower()] = m.group("val")
        return replace(world, entities=tuple(
            replace(e, attributes=attrs) if e.eid == target.eid else e
            for e in world.entities))
    m = _ADD_STYLE_RE.match(line)
    if m:
        return replace(world, globals=world.globals + (m.group("what"),))
    m = _ADD_RE.match(line)
    if m:
        what = m.group("what")
        eid = f"added-{len(world.entities) + 1}"
        return replace(world, entities=world.entities + (
            Entity(eid=eid, labels=(what,)),))
    raise EditorError(f"cannot interpret {line!r}")
