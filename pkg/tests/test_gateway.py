"""Backend plumbing: templates, transport, cache, verify scheduling."""

import json
import random
import threading

import pytest

from vidfaith import fixtures
from vidfaith.dsl import DiagnosticKind, ParseFailure, render_fact_body
from vidfaith.gateway import (
    BackendConfig,
    CacheMiss,
    CallCounter,
    ChatRequest,
    HttpChatBackend,
    HttpVideoQA,
    PromptRole,
    PromptTemplate,
    ResponseCache,
    Schedule,
    ScriptedBackend,
    TransportError,
    cached_call,
    canonical_request,
    default_template,
    extract_facts,
    generate_dependencies,
    generate_questions,
    request_key,
    user_request,
    verify,
)
from vidfaith.graph import build_graph
from vidfaith.oracle import (
    OracleVerifier,
    inject_hallucinations,
    HallucinationSpec,
    applicable_kinds,
    random_world,
    synthesize_facts,
)
from vidfaith.types import (
    FactCategory,
    FactSet,
    FactTuple,
    QuestionRecord,
    Task,
    Verdict,
    VideoKind,
    VideoRef,
)


def chain_fixture():
    facts = FactSet((
        FactTuple(1, FactCategory.ENTITY, "whole", ("dog",)),
        FactTuple(2, FactCategory.ATTRIBUTE, "color", ("dog", "white")),
        FactTuple(3, FactCategory.EVENT, "binding", ("dog", "white")),
    ))
    g, _ = build_graph(facts, {1: (), 2: (1,), 3: (2,)})
    questions = [QuestionRecord(1, "q1"), QuestionRecord(2, "q2"),
                 QuestionRecord(3, "q3")]
    return facts, g, questions


class MappedQA:
    """Test double answering by exact question text."""

    def __init__(self, answers, fail=()):
        self.answers = dict(answers)
        self.fail = set(fail)
        self.asked = []

    def answer(self, video, question, fact=None):
        self.asked.append(question)
        if question in self.fail:
            raise TransportError("synthetic outage")
        return self.answers.get(question, "unknown")


# ---------------------------------------------------------------------------
# templates


def test_default_templates_cover_few_shot_roles():
    for role in (PromptRole.EXTRACT_T2V, PromptRole.EXTRACT_V2T,
                 PromptRole.QUESTION, PromptRole.DEPENDENCY):
        template = default_template(role)
        assert template.demonstrations
        assert "output format:" in template.preamble


def test_template_render_layout():
    template = PromptTemplate(
        PromptRole.QUESTION,
        "Task: something.\noutput format: id | question",
        (("input: x\n1 | entity - whole (x)", "output: 1 | Is there an x?"),))
    prompt = template.render("input: y\n1 | entity - whole (y)\noutput:")
    assert prompt.startswith("Task: something.")
    assert "output: 1 | Is there an x?" in prompt
    assert prompt.endswith("output:")


def test_template_validation():
    with pytest.raises(ValueError):
        PromptTemplate(PromptRole.QUESTION, "output format: id | question")
    with pytest.raises(ValueError):
        PromptTemplate(PromptRole.QUESTION, "no format line",
                       (("a", "b"),))
    # free-form roles carry no demonstrations
    PromptTemplate(PromptRole.CORRECT_TEXT, "rewrite it.")


def test_template_demo_limit():
    full = default_template(PromptRole.EXTRACT_V2T)
    small = default_template(PromptRole.EXTRACT_V2T, limit=3)
    assert len(small.demonstrations) == 3
    assert small.demonstrations == full.demonstrations[:3]


# ---------------------------------------------------------------------------
# replaying the corpus through the stage operations


@pytest.mark.parametrize("name", fixtures.NAMES)
def test_extraction_replays_corpus_byte_exactly(name):
    case = fixtures.load_fixture(name)
    for role, task in ((PromptRole.EXTRACT_V2T, Task.V2T),
                       (PromptRole.EXTRACT_T2V, Task.T2V)):
        if role.value not in case.blocks:
            continue
        completion = case.blocks[role.value][1]
        backend = ScriptedBackend([completion])
        facts, _ = extract_facts(
            case.input_text, task, backend,
            query=case.query if task is Task.V2T else None)
        assert facts == case.facts


@pytest.mark.parametrize("name", fixtures.NAMES)
def test_question_generation_replays_corpus(name):
    case = fixtures.load_fixture(name)
    if "question" not in case.blocks:
        pytest.skip("case has no question block")
    backend = ScriptedBackend([case.blocks["question"][1]])
    records, _ = generate_questions(case.facts, case.input_text, backend)
    assert records == sorted(case.questions, key=lambda r: r.fact_id)


@pytest.mark.parametrize("name", fixtures.NAMES)
def test_dependency_generation_replays_corpus(name):
    case = fixtures.load_fixture(name)
    if "dependency" not in case.blocks:
        pytest.skip("case has no dependency block")
    backend = ScriptedBackend([case.blocks["dependency"][1]])
    deps, _ = generate_dependencies(case.facts, case.input_text, backend)
    assert deps == case.deps


def test_extract_preconditions():
    backend = ScriptedBackend(default="1 | entity - whole (dog)")
    with pytest.raises(ValueError):
        extract_facts("   ", Task.T2V, backend)
    with pytest.raises(ValueError):
        extract_facts("a dog", Task.V2T, backend)
    with pytest.raises(ValueError):
        extract_facts("a dog", Task.T2V, backend, query="describe it")


def test_extract_parse_failure_carries_completion():
    backend = ScriptedBackend(["nothing usable here"])
    with pytest.raises(ParseFailure) as info:
        extract_facts("a dog", Task.T2V, backend)
    assert info.value.completion == "nothing usable here"


def test_question_generation_fills_missing_ids():
    facts = FactSet((
        FactTuple(1, FactCategory.ENTITY, "whole", ("dog",)),
        FactTuple(2, FactCategory.ATTRIBUTE, "color", ("dog", "white")),
    ))
    backend = ScriptedBackend(["output: 1 | Is there a dog?"])
    records, diags = generate_questions(facts, "a white dog", backend)
    assert records == [QuestionRecord(1, "Is there a dog?"),
                       QuestionRecord(2, None)]
    assert any(d.kind is DiagnosticKind.MISSING_ID for d in diags)


def test_question_generation_drops_unknown_ids():
    facts = FactSet((FactTuple(1, FactCategory.ENTITY, "whole", ("dog",)),))
    backend = ScriptedBackend(
        ["output: 1 | Is there a dog?\n9 | Is there a cat?"])
    records, diags = generate_questions(facts, "a dog", backend)
    assert [r.fact_id for r in records] == [1]
    assert any(d.kind is DiagnosticKind.DANGLING_REFERENCE for d in diags)


def test_dependency_generation_fills_and_drops():
    facts = FactSet((
        FactTuple(1, FactCategory.ENTITY, "whole", ("dog",)),
        FactTuple(2, FactCategory.ATTRIBUTE, "color", ("dog", "white")),
    ))
    backend = ScriptedBackend(["output: 1 | 0\n7 | 1"])
    deps, diags = generate_dependencies(facts, "a white dog", backend)
    assert deps == {1: (), 2: ()}
    kinds = {d.kind for d in diags}
    assert DiagnosticKind.MISSING_ID in kinds
    assert DiagnosticKind.DANGLING_REFERENCE in kinds


def test_stage_preconditions_reject_empty_facts():
    backend = ScriptedBackend(default="output: 1 | 0")
    empty = FactSet(())
    with pytest.raises(ValueError):
        generate_questions(empty, "text", backend)
    with pytest.raises(ValueError):
        generate_dependencies(empty, "text", backend)


# ---------------------------------------------------------------------------
# http backend


def make_transport(script):
    """script: list of (status, payload) or exceptions, popped per call."""
    calls = []

    def transport(url, body, headers, timeout_s):
        calls.append({"url": url, "body": body, "headers": headers,
                      "timeout_s": timeout_s})
        step = script.pop(0)
        if isinstance(step, Exception):
            raise step
        return step

    return transport, calls


def completion_payload(text):
    return {"choices": [{"message": {"content": text}}]}


def config(**overrides):
    base = dict(endpoint_url="https://example.test/v1/chat",
                model_name="demo-model", timeout_s=5.0,
                retry_attempts=3, retry_backoff_s=(0.0,))
    base.update(overrides)
    return BackendConfig(**base)


def test_http_backend_success_shape():
    transport, calls = make_transport([(200, completion_payload("hi"))])
    backend = HttpChatBackend(config(), transport)
    out = backend.complete(user_request("", "say hi", max_tokens=64))
    assert out == "hi"
    body = calls[0]["body"]
    assert body["model"] == "demo-model"
    assert body["temperature"] == 0.0
    assert body["max_tokens"] == 64
    assert body["messages"] == [{"role": "user", "content": "say hi"}]
    assert calls[0]["headers"]["content-type"] == "application/json"
    assert "authorization" not in calls[0]["headers"]
    assert calls[0]["timeout_s"] == 5.0


def test_http_backend_reads_key_from_configured_env_var(monkeypatch):
    monkeypatch.setenv("DEMO_KEY", "sekrit")
    transport, calls = make_transport([(200, completion_payload("ok"))])
    backend = HttpChatBackend(config(api_key_env_var="DEMO_KEY"), transport)
    backend.complete(user_request("", "x"))
    assert calls[0]["headers"]["authorization"] == "Bearer sekrit"


def test_http_backend_without_key_env_sends_no_auth(monkeypatch):
    monkeypatch.delenv("DEMO_KEY", raising=False)
    transport, calls = make_transport([(200, completion_payload("ok"))])
    backend = HttpChatBackend(config(api_key_env_var="DEMO_KEY"), transport)
    backend.complete(user_request("", "x"))
    assert "authorization" not in calls[0]["headers"]


def test_http_backend_retries_transient_failures():
    transport, calls = make_transport([
        ConnectionError("refused"),
        (503, {}),
        (200, completion_payload("third time")),
    ])
    slept = []
    backend = HttpChatBackend(config(retry_backoff_s=(0.1, 0.4)), transport,
                              sleep=slept.append)
    assert backend.complete(user_request("", "x")) == "third time"
    assert len(calls) == 3
    assert slept == [0.1, 0.4]


def test_http_backend_gives_up_after_attempts():
    transport, calls = make_transport([(500, {}), (429, {}), (500, {})])
    backend = HttpChatBackend(config(), transport, sleep=lambda _: None)
    with pytest.raises(TransportError, match="3 attempts"):
        backend.complete(user_request("", "x"))
    assert len(calls) == 3


def test_http_backend_client_errors_do_not_retry():
    transport, calls = make_transport([(404, {})])
    backend = HttpChatBackend(config(), transport)
    with pytest.raises(TransportError, match="404"):
        backend.complete(user_request("", "x"))
    assert len(calls) == 1


def test_http_backend_rejects_malformed_payload():
    transport, _ = make_transport([(200, {"choices": []})])
    backend = HttpChatBackend(config(), transport)
    with pytest.raises(TransportError, match="malformed"):
        backend.complete(user_request("", "x"))


def test_backend_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        config(max_parallel=0)
    with pytest.raises(ValueError):
        config(retry_attempts=0)
    cfg = config(max_parallel=4)
    again = BackendConfig.from_dict(cfg.to_json_dict())
    assert again == cfg
    with pytest.raises(ValueError):
        BackendConfig.from_dict({"endpoint_url": "u", "model_name": "m",
                                 "api_secret": "never"})


def test_http_videoqa_packs_locator_and_question():
    chat = ScriptedBackend(["yes"])
    qa = HttpVideoQA(chat, model="vqa-model")
    video = VideoRef(VideoKind.PATH, "/tmp/clip.mp4")
    assert qa.answer(video, "Is there a dog?") == "yes"
    request = chat.requests[0]
    assert request.model == "vqa-model"
    parts = request.messages[0]["content"]
    assert parts[0] == {"type": "video", "video": "/tmp/clip.mp4"}
    assert parts[1] == {"type": "text", "text": "Is there a dog?"}


def test_scripted_backend_exhaustion():
    backend = ScriptedBackend(["one"])
    assert backend.complete(user_request("", "a")) == "one"
    with pytest.raises(TransportError):
        backend.complete(user_request("", "b"))


# ---------------------------------------------------------------------------
# cache


def test_request_key_sensitivity():
    request = user_request("m", "hello")
    base = request_key("endpoint-a", request)
    assert base == request_key("endpoint-a", user_request("m", "hello"))
    assert base != request_key("endpoint-b", request)
    warmer = ChatRequest(request.model, request.messages, temperature=0.7,
                         max_tokens=request.max_tokens)
    assert base != request_key("endpoint-a", warmer)


def test_cache_store_and_lookup(tmp_path):
    cache = ResponseCache(tmp_path)
    request = user_request("m", "hello")
    key = request_key("e", request)
    assert cache.lookup(key) is None
    cache.store(key, "completion text", canonical_request("e", request))
    assert cache.lookup(key) == "completion text"
    assert len(cache) == 1
    sidecar = json.loads((tmp_path / f"{key}.json").read_text())
    assert sidecar["model"] == "m"
    assert not list(tmp_path.glob("*.tmp"))


def test_cached_call_second_hit_is_free(tmp_path):
    cache = ResponseCache(tmp_path)
    backend = CallCounter(ScriptedBackend(["only answer"]))
    request = user_request("m", "question")
    assert cached_call(backend, request, cache) == "only answer"
    assert cached_call(backend, request, cache) == "only answer"
    assert backend.calls == 1


def test_cached_call_replay_only(tmp_path):
    warm = ResponseCache(tmp_path)
    request = user_request("m", "q")
    backend = ScriptedBackend(["a"])
    cached_call(backend, request, warm)
    replay = ResponseCache(tmp_path, replay_only=True)
    silent = CallCounter(ScriptedBackend([]))
    assert cached_call(silent, request, replay) == "a"
    assert silent.calls == 0
    with pytest.raises(CacheMiss):
        cached_call(silent, user_request("m", "other"), replay)


def test_cache_concurrent_writers_converge(tmp_path):
    cache = ResponseCache(tmp_path)
    request = user_request("m", "q")
    key = request_key("e", request)
    errors = []

    def write():
        try:
            for _ in range(50):
                cache.store(key, "stable", canonical_request("e", request))
        except Exception as exc:
            errors.append(exc)

    threads = [threading.Thread(target=write) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert cache.lookup(key) == "stable"
    assert not list(tmp_path.glob("*.tmp"))


# ---------------------------------------------------------------------------
# verify


def test_verify_eager_asks_everything():
    facts, g, questions = chain_fixture()
    backend = MappedQA({"q1": "no", "q2": "yes", "q3": "yes"})
    result = verify(None, facts, questions, g, backend,
                    schedule=Schedule.EAGER)
    assert result.calls == 3
    assert result.verdicts == {1: Verdict.NO, 2: Verdict.YES, 3: Verdict.YES}
    assert result.negatives() == (1,)


def test_verify_lazy_prunes_below_a_no():
    facts, g, questions = chain_fixture()
    backend = MappedQA({"q1": "no", "q2": "yes", "q3": "yes"})
    result = verify(None, facts, questions, g, backend,
                    schedule=Schedule.LAZY)
    assert result.calls == 1
    assert result.verdicts == {1: Verdict.NO, 2: Verdict.SKIPPED,
                               3: Verdict.SKIPPED}
    assert backend.asked == ["q1"]


def test_verify_lazy_does_not_prune_on_unknown():
    facts, g, questions = chain_fixture()
    backend = MappedQA({"q1": "maybe", "q2": "yes", "q3": "yes"})
    result = verify(None, facts, questions, g, backend,
                    schedule=Schedule.LAZY)
    assert result.calls == 3
    assert result.verdicts[1] is Verdict.UNKNOWN
    assert result.verdicts[2] is Verdict.YES


def test_verify_transport_error_degrades_to_unknown():
    facts, g, questions = chain_fixture()
    backend = MappedQA({"q1": "yes", "q3": "yes"}, fail={"q2"})
    result = verify(None, facts, questions, g, backend,
                    schedule=Schedule.EAGER)
    assert result.verdicts[2] is Verdict.UNKNOWN
    assert 2 in result.errors
    assert result.verdicts[1] is Verdict.YES and result.calls == 3


def test_verify_skips_nan_questions():
    facts, g, _ = chain_fixture()
    questions = [QuestionRecord(1, "q1"), QuestionRecord(2, None),
                 QuestionRecord(3, "q3")]
    backend = MappedQA({"q1": "yes", "q3": "yes"})
    result = verify(None, facts, questions, g, backend,
                    schedule=Schedule.EAGER)
    assert set(result.verdicts) == {1, 3}
    assert result.calls == 2


def test_verify_rejects_questions_outside_graph():
    facts, g, questions = chain_fixture()
    questions.append(QuestionRecord(9, "q9"))
    with pytest.raises(ValueError):
        verify(None, facts, questions, g, MappedQA({}))


def test_verify_normalizes_free_form_answers():
    facts, g, questions = chain_fixture()
    backend = MappedQA({"q1": "Yes, clearly.", "q2": "No, the door is red.",
                        "q3": "hard to say"})
    result = verify(None, facts, questions, g, backend,
                    schedule=Schedule.EAGER)
    assert result.verdicts == {1: Verdict.YES, 2: Verdict.NO,
                               3: Verdict.UNKNOWN}
    assert result.raw_answers[2] == "No, the door is red."


def test_verify_eager_parallel_matches_sequential():
    facts, g, questions = chain_fixture()
    sequential = verify(None, facts, questions, g,
                        MappedQA({"q1": "yes", "q2": "no", "q3": "yes"}),
                        schedule=Schedule.EAGER)
    parallel = verify(None, facts, questions, g,
                      MappedQA({"q1": "yes", "q2": "no", "q3": "yes"}),
                      schedule=Schedule.EAGER, max_parallel=3)
    assert parallel.verdicts == sequential.verdicts
    assert parallel.calls == sequential.calls


def test_verify_uses_cache_across_runs(tmp_path):
    facts, g, questions = chain_fixture()
    cache = ResponseCache(tmp_path)
    first = CallCounter(MappedQA({"q1": "yes", "q2": "yes", "q3": "yes"}))
    a = verify(None, facts, questions, g, first, cache=cache,
               schedule=Schedule.EAGER)
    assert a.calls == 3 and first.calls == 3
    second = CallCounter(MappedQA({}))
    second.answers = {}
    b = verify(None, facts, questions, g, second, cache=cache,
               schedule=Schedule.EAGER)
    assert b.calls == 0 and second.calls == 0
    assert b.verdicts == a.verdicts


def test_verify_replay_only_cold_cache_raises(tmp_path):
    facts, g, questions = chain_fixture()
    cache = ResponseCache(tmp_path, replay_only=True)
    with pytest.raises(CacheMiss):
        verify(None, facts, questions, g, MappedQA({}), cache=cache)


def test_verify_oracle_backend_end_to_end():
    world = random_world(4)
    facts, deps = synthesize_facts(world, 4)
    g, _ = build_graph(facts, deps)
    questions = [QuestionRecord(f.fact_id,
                                f"Is this true: {render_fact_body(f)}?")
                 for f in facts]
    backend = OracleVerifier(world)
    for schedule in Schedule:
        result = verify(None, facts, questions, g, backend,
                        schedule=schedule)
        assert all(v is Verdict.YES for v in result.verdicts.values())
        assert result.calls == len(facts)


@pytest.mark.parametrize("seed", range(0, 20))
def test_lazy_never_asks_more_than_eager(seed):
    world = random_world(seed)
    facts, deps = synthesize_facts(world, seed)
    kind = random.Random(seed).choice(
        applicable_kinds(world, facts, deps, seed))
    mutated, deps2, _ = inject_hallucinations(
        facts, deps, world, HallucinationSpec(kind, seed, 1))
    g, _ = build_graph(mutated, deps2)
    questions = [QuestionRecord(f.fact_id,
                                f"Is this true: {render_fact_body(f)}?")
                 for f in mutated]
    backend = OracleVerifier(world)
    eager = verify(None, mutated, questions, g, backend,
                   schedule=Schedule.EAGER)
    lazy = verify(None, mutated, questions, g, backend,
                  schedule=Schedule.LAZY)
    assert lazy.calls <= eager.calls
    negatives_with_children = [
        fid for fid, v in eager.verdicts.items()
        if v is Verdict.NO and g.invalidated_closure({fid})]
    if negatives_with_children:
        assert lazy.calls < eager.calls
    # answered nodes agree between schedules
    for fid, verdict in lazy.verdicts.items():
        if verdict is not Verdict.SKIPPED:
            assert eager.verdicts[fid] is verdict
