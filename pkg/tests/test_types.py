import pathlib

import pytest
from hypothesis import given
from hypothesis import strategies as st

from vidfaith.types import (
    FactCategory,
    FactSet,
    FactTuple,
    QuestionRecord,
    Verdict,
    normalize_answer,
)

DATA = pathlib.Path(__file__).parent / "data"


def _tuple(fact_id=1, category=FactCategory.ENTITY, subtype="whole",
           args=("man",)):
    return FactTuple(fact_id, category, subtype, args)


def test_fact_tuple_rejects_bad_ids_and_blank_args():
    with pytest.raises(ValueError):
        _tuple(fact_id=0)
    with pytest.raises(ValueError):
        _tuple(fact_id=-3)
    with pytest.raises(ValueError):
        _tuple(args=("man", "  "))
    with pytest.raises(ValueError):
        _tuple(args=())


def test_subtype_key_normalizes_spacing_and_case():
    assert _tuple(subtype="Text Rendering").subtype_key() == "text-rendering"
    assert _tuple(subtype="ambiguity").subtype_key() == "ambiguity"
    assert _tuple(subtype=None).subtype_key() is None


def test_fact_set_lookup_and_duplicate_rejection():
    facts = FactSet((_tuple(1), _tuple(2, args=("ramp",))))
    assert len(facts) == 2
    assert 1 in facts and 3 not in facts
    assert facts.get(2).args == ("ramp",)
    assert facts.ids() == (1, 2)
    assert [f.fact_id for f in facts] == [1, 2]
    with pytest.raises(ValueError):
        FactSet((_tuple(1), _tuple(1)))


def test_question_record_askable():
    assert QuestionRecord(1, "Is there a man?").askable
    assert not QuestionRecord(1, None).askable


def _normalize_table():
    rows = []
    for line in (DATA / "normalize_cases.txt").read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        expected, _, raw = line.partition("\t")
        rows.append((raw, Verdict(expected)))
    return rows


def test_normalize_answer_table():
    rows = _normalize_table()
    assert len(rows) >= 30
    for raw, expected in rows:
        assert normalize_answer(raw) is expected, raw


def test_normalize_answer_idempotent_on_table():
    for raw, _ in _normalize_table():
        once = normalize_answer(raw)
        assert normalize_answer(once.value) is once


@given(st.text(max_size=40))
def test_normalize_answer_total_and_idempotent(raw):
    verdict = normalize_answer(raw)
    assert verdict in (Verdict.YES, Verdict.NO, Verdict.UNKNOWN)
    assert normalize_answer(verdict.value) is verdict
