"""Transcribed few-shot corpora and curated scene worlds.

The corpus files under ``corpus/`` hold 26 worked examples as raw text,
hard wraps and typos included, so the parsers are exercised against the
real thing rather than a cleaned-up copy. ``oddities.json`` lists the
quirks each case is known to carry; anything beyond that list fails the
load, which is how fixture drift is caught.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from .. import dsl
from ..graph import CyclePolicy, Stsdg, build_graph
from ..types import FactSet, QuestionRecord, VidFaithError

NAMES = (
    "skateboarder",
    "car_soccer",
    "emoji",
    "bear_table",
    "children_frisbee",
    "chalk_word",
    "fruit_bowl",
    "motorcycle_closeup",
    "sad_man",
    "airplane",
    "soccer_boy",
    "traffic_light",
    "table_traffic_light",
    "pomeranian",
    "band",
    "laptops",
    "red_motorcycle",
    "cube",
    "espresso",
    "elephant_river",
    "manhattan",
    "laptop_desk",
    "slopes",
    "man_dog_room",
    "car_roadside",
    "man_carry_bag",
)

# corpus file per prompt role
ROLE_FILES = {
    "extract_v2t": "extract_v2t.txt",
    "extract_t2v": "extract_t2v.txt",
    "question": "questions.txt",
    "dependency": "dependencies.txt",
}

_ID_LINE = re.compile(r"^\d+\s*\|")


class FixtureError(VidFaithError):
    """Fixture data failed its load-time cross-checks."""


def _corpus_text(filename: str) -> str:
    return (resources.files(__package__) / "corpus" / filename).read_text(
        encoding="utf-8")


def _split_cases(text: str, marker: str) -> list[str]:
    cases: list[list[str]] = []
    for raw in text.splitlines():
        if raw.startswith(marker):
            cases.append([raw])
        elif cases:
            cases[-1].append(raw)
        elif raw.strip():
            raise FixtureError(f"corpus content before first {marker!r} line")
    return ["\n".join(lines) for lines in cases]


def _case_halves(case: str) -> tuple[str, str]:
    """Split one case at its ``output:`` line: (context, expected)."""
    lines = case.splitlines()
    for i, line in enumerate(lines):
        if line.startswith("output:"):
            return "\n".join(lines[:i]), "\n".join(lines[i:])
    raise FixtureError("case has no output: line")


def _prefixed_text(context: str, prefix: str, stop_prefixes: tuple[str, ...],
                   ) -> str:
    """Collect the free text of one ``prefix:`` section, unwrapped."""
    words: list[str] = []
    active = False
    for raw in context.splitlines():
        if raw.startswith(prefix):
            active = True
            words.extend(raw[len(prefix):].split())
            continue
        if active:
            if raw.startswith(stop_prefixes) or _ID_LINE.match(raw.strip()):
                break
            words.extend(raw.split())
    return " ".join(words)


@dataclass(frozen=True)
class FixtureCase:
    """One worked example across all four corpus files."""

    name: str
    provenance: str
    query: str | None
    input_text: str
    facts: FactSet
    questions: tuple[QuestionRecord, ...]
    deps: dict[int, tuple[int, ...]]
    # raw (context, expected-output) halves per prompt role, verbatim
    blocks: dict[str, tuple[str, str]]
    warnings: tuple[dsl.Diagnostic, ...]

    @property
    def expected_facts(self) -> str:
        return self.blocks["extract_v2t"][1]

    @property
    def expected_questions(self) -> str:
        return self.blocks["question"][1]

    @property
    def expected_deps(self) -> str:
        return self.blocks["dependency"][1]

    def graph(self, policy: CyclePolicy = CyclePolicy.REJECT) -> Stsdg:
        g, _ = build_graph(self.facts, self.deps, policy)
        return g


def _oddities() -> dict[str, dict]:
    raw = (resources.files(__package__) / "corpus" / "oddities.json"
           ).read_text(encoding="utf-8")
    return json.loads(raw)


def _check_diagnostics(name: str, where: str,
                       diags: list[dsl.Diagnostic],
                       allowed: set[str]) -> list[dsl.Diagnostic]:
    for diag in diags:
        if diag.is_error:
            raise FixtureError(
                f"{name}/{where}: error diagnostic "
                f"{diag.kind.value} at line {diag.line_no}: {diag.message}")
        if diag.kind.value not in allowed:
            raise FixtureError(
                f"{name}/{where}: unexpected warning "
                f"{diag.kind.value}: {diag.message}")
    return diags


@lru_cache(maxsize=1)
def fixture_suite() -> tuple[FixtureCase, ...]:
    """Load, parse, and cross-validate all corpus cases."""
    per_role: dict[str, list[str]] = {}
    for role, filename in ROLE_FILES.items():
        marker = "query:" if role == "extract_v2t" else "input:"
        per_role[role] = _split_cases(_corpus_text(filename), marker)
        if len(per_role[role]) != len(NAMES):
            raise FixtureError(
                f"{filename}: expected {len(NAMES)} cases, "
                f"found {len(per_role[role])}")

    oddities = _oddities()
    cases: list[FixtureCase] = []
    for index, name in enumerate(NAMES):
        allowed = set(oddities.get(name, {}).get("diagnostics", ()))
        warnings: list[dsl.Diagnostic] = []
        blocks: dict[str, tuple[str, str]] = {}
        texts: dict[str, str] = {}
        for role in ROLE_FILES:
            context, expected = _case_halves(per_role[role][index])
            blocks[role] = (context, expected)
            texts[role] = _prefixed_text(context, "input:", ("output:",))

        canonical_text = texts["extract_v2t"]
        for role, text in texts.items():
            if text != canonical_text:
                raise FixtureError(f"{name}: input text drifts in {role}")

        facts, fact_diags = dsl.parse_fact_block(blocks["extract_v2t"][1])
        warnings += _check_diagnostics(name, "facts", fact_diags, allowed)
        facts_t2v, t2v_diags = dsl.parse_fact_block(blocks["extract_t2v"][1])
        _check_diagnostics(name, "facts_t2v", t2v_diags, allowed)
        if facts_t2v.facts != facts.facts:
            raise FixtureError(f"{name}: fact blocks differ between tasks")

        ids = set(facts.ids())
        questions, q_diags = dsl.parse_question_block(
            blocks["question"][1], fact_ids=ids)
        warnings += _check_diagnostics(name, "questions", q_diags, allowed)
        if {q.fact_id for q in questions} != ids:
            raise FixtureError(f"{name}: question ids do not cover fact ids")

        deps, d_diags = dsl.parse_dependency_block(
            blocks["dependency"][1], fact_ids=ids)
        warnings += _check_diagnostics(name, "deps", d_diags, allowed)
        if set(deps) != ids:
            raise FixtureError(f"{name}: dependency ids do not cover fact ids")

        graph, graph_diags = build_graph(facts, deps, CyclePolicy.REJECT)
        _check_diagnostics(name, "graph", graph_diags, allowed)
        del graph

        query = _prefixed_text(
            blocks["extract_v2t"][0], "query:", ("input:",)) or None
        cases.append(FixtureCase(
            name=name,
            provenance=f"extract_v2t.txt#{index + 1}",
            query=query,
            input_text=canonical_text,
            facts=facts,
            questions=tuple(questions),
            deps=deps,
            blocks=blocks,
            warnings=tuple(warnings),
        ))
    return tuple(cases)


def load_fixture(name: str) -> FixtureCase:
    for case in fixture_suite():
        if case.name == name:
            return case
    raise FixtureError(f"no fixture named {name!r}")


def world_names() -> tuple[str, ...]:
    worlds_dir = resources.files(__package__) / "worlds"
    names = sorted(
        entry.name[:-5] for entry in worlds_dir.iterdir()
        if entry.name.endswith(".json"))
    return tuple(names)


def world_json(name: str) -> dict:
    path = resources.files(__package__) / "worlds" / f"{name}.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FixtureError(f"no world named {name!r}") from None
