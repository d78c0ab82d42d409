"""Acceptance gate: one test per criterion, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines live;
without ``-s`` they appear in captured output on failure.
"""

import json
import math
import random
import time

import pytest

from vidfaith.cli import main as cli_main
from vidfaith.correction import (
    PipelineHandles,
    evaluate_record,
    run_correction_loop,
)
from vidfaith.dsl import (
    parse_dependency_block,
    parse_fact_block,
    parse_question_block,
    render_fact_block,
)
from vidfaith.fixtures import fixture_suite, world_json
from vidfaith.gateway import Schedule, verify
from vidfaith.graph import build_graph
from vidfaith.oracle import (
    HallucinationSpec,
    OracleDependency,
    OracleExtractor,
    OracleQuestioner,
    OracleTextCorrector,
    OracleVerifier,
    SceneWorld,
    applicable_kinds,
    brute_force_f_hat,
    infer_dependencies,
    inject_hallucinations,
    random_world,
    synthesize_facts,
    verify_fact,
)
from vidfaith.scoring import (
    InvalidHandling,
    Propagation,
    ScoringConfig,
    score_verdicts,
)
from vidfaith.stats import kendall_tau, pearson, spearman
from vidfaith.types import (
    EvalRecord,
    FactCategory,
    FactSet,
    FactTuple,
    QuestionRecord,
    Task,
    Verdict,
    VideoKind,
    VideoRef,
)

YES, NO, UNK = Verdict.YES, Verdict.NO, Verdict.UNKNOWN

ALL_CONFIGS = [
    ScoringConfig(propagation=p, invalid_handling=h)
    for p in Propagation for h in InvalidHandling
]


class criterion:
    """Prints the criterion's verdict line no matter how the test ends."""

    def __init__(self, number: int, label: str):
        self.number = number
        self.label = label

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        print(f"criterion {self.number}: {status} - {self.label}",
              flush=True)
        return False


# ------------------------------------------------------------ shared helpers

_SHAPES = (
    (FactCategory.ENTITY, "whole", 1),
    (FactCategory.ATTRIBUTE, "color", 2),
    (FactCategory.RELATION, "spatial", 2),
    (FactCategory.RELATION, "temporal", 2),
    (FactCategory.ACTION, None, 2),
    (FactCategory.EVENT, "binding", 3),
    (FactCategory.GLOBAL, "style", 1),
)


def random_instance(seed: int, max_nodes: int = 12):
    """Random DAG (edges only point to smaller ids) with random verdicts."""
    rng = random.Random(seed)
    n = rng.randint(1, max_nodes)
    ids = list(range(1, n + 1))
    deps = {}
    for position, node in enumerate(ids):
        earlier = ids[:position]
        k = rng.randint(0, min(3, len(earlier)))
        deps[node] = tuple(sorted(rng.sample(earlier, k)))
    facts = []
    for i in ids:
        cat, subtype, arity = _SHAPES[rng.randrange(len(_SHAPES))]
        args = tuple(f"thing {i}.{j}" for j in range(arity))
        facts.append(FactTuple(i, cat, subtype, args))
    verdicts = {i: rng.choice((YES, NO, UNK)) for i in ids}
    return FactSet(tuple(facts)), deps, verdicts


def oracle_handles(world: SceneWorld | None) -> PipelineHandles:
    return PipelineHandles(
        extractor=OracleExtractor(),
        questioner=OracleQuestioner(),
        dependency=OracleDependency(),
        verifier=OracleVerifier(world),
        corrector=OracleTextCorrector(),
    )


def v2t_record(text: str, record_id: str = "r") -> EvalRecord:
    return EvalRecord(record_id, Task.V2T, text,
                      VideoRef(VideoKind.SCENE_WORLD, "unused"),
                      query="Please generate a caption for the video.")


def injected_case(seed: int):
    """World plus a fact set carrying exactly one seeded defect."""
    world = random_world(seed)
    facts, deps = synthesize_facts(world, seed)
    kind = random.Random(seed).choice(
        applicable_kinds(world, facts, deps, seed))
    mutated, deps2, log = inject_hallucinations(
        facts, deps, world, HallucinationSpec(kind, seed, 1))
    return world, mutated, deps2, log


# ----------------------------------------------------------------- criteria


def test_criterion_1_parser_corpus_round_trip():
    with criterion(1, "corpus parses clean and round-trips, under 1 s"):
        started = time.perf_counter()
        suite = fixture_suite()
        assert suite
        for case in suite:
            for role, (context, output) in case.blocks.items():
                if role.startswith("extract"):
                    facts, diags = parse_fact_block(output)
                    assert not any(d.is_error for d in diags), case.name
                    reparsed, _ = parse_fact_block(render_fact_block(facts))
                    assert tuple(reparsed) == tuple(facts), case.name
                elif role == "question":
                    _, diags = parse_question_block(output, case.facts)
                    assert not any(d.is_error for d in diags), case.name
                elif role == "dependency":
                    _, diags = parse_dependency_block(output, case.facts)
                    assert not any(d.is_error for d in diags), case.name
        elapsed = time.perf_counter() - started
        assert elapsed < 1.0, f"corpus took {elapsed:.2f}s"


def test_criterion_2_refinement_matches_brute_force():
    with criterion(2, "scoring matches brute force on 1000 random DAGs, "
                      "under 10 s"):
        started = time.perf_counter()
        configs = (
            ScoringConfig(propagation=Propagation.DIRECT),
            ScoringConfig(propagation=Propagation.TRANSITIVE),
        )
        for seed in range(1000):
            facts, deps, verdicts = random_instance(seed, max_nodes=12)
            graph, _ = build_graph(facts, deps)
            for cfg in configs:
                ours = score_verdicts(facts, graph, verdicts, cfg).f_hat
                theirs = brute_force_f_hat(deps, verdicts, cfg)
                assert ours == theirs, (seed, cfg.propagation)
        elapsed = time.perf_counter() - started
        assert elapsed < 10.0, f"fidelity sweep took {elapsed:.2f}s"


def test_criterion_3_single_flip_monotonicity():
    with criterion(3, "single no->yes flip never lowers f_hat, 500 "
                      "instances x 4 configs"):
        for seed in range(500):
            facts, deps, verdicts = random_instance(seed, max_nodes=10)
            graph, _ = build_graph(facts, deps)
            negatives = [i for i, v in verdicts.items() if v is NO]
            for flip in negatives:
                flipped = dict(verdicts)
                flipped[flip] = YES
                for cfg in ALL_CONFIGS:
                    before = score_verdicts(facts, graph, verdicts,
                                            cfg).f_hat
                    after = score_verdicts(facts, graph, flipped,
                                           cfg).f_hat
                    if before is None or after is None:
                        continue
                    assert after >= before - 1e-12, (seed, flip, cfg)


def test_criterion_4_oracle_end_to_end():
    with criterion(4, "clean worlds score exactly 1.0; 200 injections "
                      "match brute force; cross-binding caught"):
        for seed in range(50):
            world = random_world(seed)
            facts, _ = synthesize_facts(world, seed)
            report = evaluate_record(
                v2t_record(render_fact_block(facts)),
                oracle_handles(world)).report
            assert report.f_hat == 1.0, seed

        for seed in range(200):
            world, mutated, _, log = injected_case(seed)
            assert log
            report = evaluate_record(
                v2t_record(render_fact_block(mutated)),
                oracle_handles(world)).report
            # the pipeline infers its own dependency map, so predict
            # against that same map, not the injection-time one
            predicted = brute_force_f_hat(
                infer_dependencies(mutated),
                {f.fact_id: verify_fact(world, f) for f in mutated})
            assert report.f_hat == predicted, seed
            assert report.f_hat is not None and report.f_hat < 1.0, seed

        # every atomic fact true, the merged event false
        two_people = SceneWorld.from_json_dict(world_json("two_people"))
        text = "\n".join([
            "1 | entity - whole (person)",
            "2 | attribute - clothing (person, red clothes)",
            "3 | attribute - headwear (person, blue hat)",
            "4 | event - binding (person, red clothes, blue hat)",
        ])
        report = evaluate_record(v2t_record(text),
                                 oracle_handles(two_people)).report
        refined = {r.fact_id: r.refined for r in report.rows}
        assert refined[1] == refined[2] == refined[3] == 1
        assert refined[4] == 0
        assert report.f_hat is not None and report.f_hat < 1.0


def test_criterion_5_lazy_eager_equivalence():
    with criterion(5, "lazy and eager schedules agree on 200 oracle runs; "
                      "lazy saves calls when a negative has descendants"):
        savings_observed = 0
        for seed in range(200):
            world, mutated, deps2, _ = injected_case(seed)
            graph, _ = build_graph(mutated, deps2)
            questions = [
                QuestionRecord(f.fact_id, f"Is this true: fact {f.fact_id}?")
                for f in mutated]
            backend = OracleVerifier(world)
            eager = verify(None, mutated, questions, graph, backend,
                           schedule=Schedule.EAGER)
            lazy = verify(None, mutated, questions, graph, backend,
                          schedule=Schedule.LAZY)
            cfg = ScoringConfig(propagation=Propagation.TRANSITIVE)
            eager_report = score_verdicts(mutated, graph, eager.verdicts,
                                          cfg, questions=questions)
            lazy_report = score_verdicts(mutated, graph, lazy.verdicts,
                                         cfg, questions=questions)
            assert eager_report == lazy_report, seed
            assert lazy.calls <= eager.calls, seed
            prunable = [fid for fid, v in eager.verdicts.items()
                        if v is NO and graph.invalidated_closure({fid})]
            if prunable:
                assert lazy.calls < eager.calls, seed
                savings_observed += 1
        assert savings_observed > 0


def _rank_by_definition(values):
    ranks = []
    ordered = sorted(values)
    for v in values:
        first = ordered.index(v) + 1
        last = len(ordered) - ordered[::-1].index(v)
        ranks.append((first + last) / 2)
    return ranks


def _pearson_by_definition(xs, ys):
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    cov = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    vx = sum((x - mx) ** 2 for x in xs)
    vy = sum((y - my) ** 2 for y in ys)
    return cov / math.sqrt(vx * vy)


def _kendall_by_definition(xs, ys):
    n = len(xs)
    concordant = discordant = 0
    for i in range(n):
        for j in range(i + 1, n):
            sign = (xs[i] - xs[j]) * (ys[i] - ys[j])
            if sign > 0:
                concordant += 1
            elif sign < 0:
                discordant += 1
    pairs = n * (n - 1) / 2

    def tie_pairs(values):
        total = 0
        for v in set(values):
            t = values.count(v)
            total += t * (t - 1) / 2
        return total

    denom = math.sqrt((pairs - tie_pairs(xs)) * (pairs - tie_pairs(ys)))
    return (concordant - discordant) / denom


def _random_vectors(seed: int):
    rng = random.Random(seed)
    n = rng.randint(3, 10)
    while True:
        if rng.random() < 0.5:
            xs = [rng.uniform(-3, 3) for _ in range(n)]
            ys = [rng.uniform(-3, 3) for _ in range(n)]
        else:
            xs = [float(rng.randint(0, 4)) for _ in range(n)]
            ys = [float(rng.randint(0, 4)) for _ in range(n)]
        if len(set(xs)) > 1 and len(set(ys)) > 1:
            return xs, ys


def test_criterion_6_correlation_correctness():
    with criterion(6, "pearson/spearman/kendall match definitional values "
                      "within 1e-9 on 100 vectors; rank-invariant"):
        for seed in range(100):
            xs, ys = _random_vectors(seed)
            assert pearson(xs, ys) == pytest.approx(
                _pearson_by_definition(xs, ys), abs=1e-9)
            assert spearman(xs, ys) == pytest.approx(
                _pearson_by_definition(_rank_by_definition(xs),
                                       _rank_by_definition(ys)), abs=1e-9)
            assert kendall_tau(xs, ys) == pytest.approx(
                _kendall_by_definition(xs, ys), abs=1e-9)
            # strictly monotone transforms leave rank statistics alone
            exs = [math.exp(x) for x in xs]
            sys_ = [3.0 * y + 7.0 for y in ys]
            assert spearman(exs, sys_) == pytest.approx(
                spearman(xs, ys), abs=1e-9)
            assert kendall_tau(exs, sys_) == pytest.approx(
                kendall_tau(xs, ys), abs=1e-9)


def test_criterion_7_correction_direction():
    with criterion(7, "correction never hurts and strictly improves the "
                      "mean over 50 injected worlds"):
        pre_scores = []
        post_scores = []
        for seed in range(50):
            world, mutated, _, _ = injected_case(seed)
            outcome = run_correction_loop(
                v2t_record(render_fact_block(mutated)),
                oracle_handles(world))
            assert outcome.pre_score.f_hat is not None
            assert outcome.post_score is not None
            assert outcome.post_score.f_hat is not None
            assert outcome.post_score.f_hat >= outcome.pre_score.f_hat
            pre_scores.append(outcome.pre_score.f_hat)
            post_scores.append(outcome.post_score.f_hat)
        mean_pre = sum(pre_scores) / len(pre_scores)
        mean_post = sum(post_scores) / len(post_scores)
        assert mean_post > mean_pre


def test_criterion_8_replay_reproducibility(tmp_path, monkeypatch):
    with criterion(8, "warm-cache replay is bit-identical across runs "
                      "with zero network calls"):
        import vidfaith.gateway as gateway

        world = SceneWorld.from_json_dict(world_json("sad_man"))
        facts, _ = synthesize_facts(world)
        block = render_fact_block(facts)
        manifest = tmp_path / "records.jsonl"
        manifest.write_text(json.dumps({
            "record_id": "r", "task": "v2t", "text": block,
            "query": "Please generate a caption for the video.",
            "video": {"kind": "scene_world", "locator": "sad_man"},
        }) + "\n")
        config = tmp_path / "config.json"
        config.write_text(json.dumps({
            "extractor": {"endpoint_url": "https://example.test/v1/chat",
                          "model_name": "fake"},
            "cache_dir": str(tmp_path / "cache"),
        }))

        network_calls = {"n": 0}

        def scripted(url, body, headers, timeout_s):
            network_calls["n"] += 1
            return 200, {"choices": [{"message": {"content": block}}]}

        monkeypatch.setattr(gateway, "_post_json", scripted)
        assert cli_main(["eval", str(manifest), "--config", str(config),
                         "--out", str(tmp_path / "warm")]) == 0
        warmup_calls = network_calls["n"]
        assert warmup_calls > 0

        def bomb(url, body, headers, timeout_s):
            network_calls["n"] += 1
            raise AssertionError("network touched during replay")

        monkeypatch.setattr(gateway, "_post_json", bomb)
        for name in ("replay_a", "replay_b"):
            assert cli_main(["eval", str(manifest), "--config", str(config),
                             "--out", str(tmp_path / name),
                             "--replay-only"]) == 0
        assert network_calls["n"] == warmup_calls
        for artifact in ("reports.jsonl", "summary.json"):
            assert ((tmp_path / "replay_a" / artifact).read_bytes()
                    == (tmp_path / "replay_b" / artifact).read_bytes())


def test_criterion_9_breakdown_consistency():
    with criterion(9, "bucket totals sum to n_scored; skateboarder "
                      "buckets match the stated counts"):
        for seed in range(200):
            facts, deps, verdicts = random_instance(seed, max_nodes=10)
            graph, _ = build_graph(facts, deps)
            for cfg in ALL_CONFIGS:
                report = score_verdicts(facts, graph, verdicts, cfg)
                total = sum(t for _, t in report.breakdown.values())
                assert total == report.n_scored, (seed, cfg)

        case = next(c for c in fixture_suite()
                    if "skateboard" in c.input_text.lower())
        graph, _ = build_graph(case.facts, case.deps)
        verdicts = {f.fact_id: YES for f in case.facts}
        report = score_verdicts(case.facts, graph, verdicts)
        assert report.f_hat == 1.0
        assert report.breakdown["Entity"] == (2, 2)
        assert report.breakdown["Attribute"] == (1, 1)
        assert report.breakdown["Spatial"] == (1, 1)
        assert report.breakdown["Action"] == (1, 1)
        assert report.breakdown["Event"] == (3, 3)
