"""Batch front end: evaluate, inspect, correct, meta-evaluate.

Subcommands mirror the pipeline stages. `eval` runs a whole manifest end
to end; `extract`, `graph`, `verify`, and `score` run one stage each over
plain JSON artifacts so any step can be rerun or hand-edited; `correct`
drives the repair loop; `metaeval` correlates reported scores against
human judgments.

Exit codes: 0 clean, 1 some records failed, 2 config or usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

from .correction import (
    HttpEditorClient,
    PipelineHandles,
    evaluate_record,
    run_correction_loop,
)
from .dsl import Diagnostic
from .gateway import (
    BackendConfig,
    HttpChatBackend,
    HttpVideoQA,
    ResponseCache,
    Schedule,
    verify as gateway_verify,
)
from .graph import CyclePolicy, build_graph
from .oracle import (
    OracleDependency,
    OracleEditInstructor,
    OracleExtractor,
    OracleQuestioner,
    OracleTextCorrector,
    OracleVerifier,
    SceneWorldEditor,
)
from .scoring import EmptyUniverse, ScoringConfig, score_verdicts
from .stats import DegenerateVariance, correlation_summary
from .types import (
    EvalRecord,
    FactCategory,
    FactSet,
    FactTuple,
    QuestionRecord,
    Task,
    Verdict,
    VideoKind,
    VideoRef,
    VidFaithError,
)

__all__ = ["ConfigError", "RunConfig", "build_handles", "main"]


class ConfigError(VidFaithError):
    """Bad configuration or unusable input; maps to exit code 2."""


# ------------------------------------------------------------------ config

_ORACLE = "oracle"
_BACKEND_ROLES = ("extractor", "questioner", "dependency", "verifier",
                  "corrector", "editor")


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs, loadable from one JSON file.

    Each backend block is either the string "oracle" or a BackendConfig
    mapping. The corrector block serves both repair flavors: text
    rewrites for v2t and edit instructions for t2v.
    """

    task: Task = Task.V2T
    extractor: BackendConfig | str = _ORACLE
    questioner: BackendConfig | str = _ORACLE
    dependency: BackendConfig | str = _ORACLE
    verifier: BackendConfig | str = _ORACLE
    # the repair roles may be null in the config file: evaluation-only
    # deployments have no corrector or editor to point at
    corrector: BackendConfig | str | None = _ORACLE
    editor: BackendConfig | str | None = _ORACLE
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    schedule: Schedule = Schedule.LAZY
    cache_dir: str | None = None
    replay_only: bool = False
    output_dir: str = "out"
    max_parallel: int = 1

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        kwargs: dict = {}
        for role in _BACKEND_ROLES:
            if role not in data:
                continue
            block = data[role]
            if block is None and role in ("corrector", "editor"):
                kwargs[role] = None
            elif block == _ORACLE:
                kwargs[role] = _ORACLE
            elif isinstance(block, Mapping):
                try:
                    kwargs[role] = BackendConfig.from_dict(block)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"bad {role} block: {exc}") from exc
            else:
                raise ConfigError(
                    f"{role} must be 'oracle' or a backend mapping")
        try:
            if "task" in data:
                kwargs["task"] = Task(data["task"])
            if "schedule" in data:
                kwargs["schedule"] = Schedule(data["schedule"])
            if "scoring" in data:
                kwargs["scoring"] = ScoringConfig.from_dict(data["scoring"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("cache_dir", "replay_only", "output_dir",
                     "max_parallel"):
            if name in data:
                kwargs[name] = data[name]
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not JSON: {exc}") from exc
        if not isinstance(data, Mapping):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)

    def to_json_dict(self) -> dict:
        def block(value: BackendConfig | str | None):
            if value is None or isinstance(value, str):
                return value
            return value.to_json_dict()

        return {
            "task": self.task.value,
            "extractor": block(self.extractor),
            "questioner": block(self.questioner),
            "dependency": block(self.dependency),
            "verifier": block(self.verifier),
            "corrector": block(self.corrector),
            "editor": block(self.editor),
            "scoring": self.scoring.to_dict(),
            "schedule": self.schedule.value,
            "cache_dir": self.cache_dir,
            "replay_only": self.replay_only,
            "output_dir": self.output_dir,
            "max_parallel": self.max_parallel,
        }

    def config_hash(self) -> str:
        """Digest of the fields that determine report content.

        Where outputs land, whether the cache is read-only, and how many
        workers run change nothing about the numbers, so they stay out
        of the hash: reports from different output directories remain
        comparable.
        """
        semantic = self.to_json_dict()
        for name in ("cache_dir", "replay_only", "output_dir",
                     "max_parallel"):
            semantic.pop(name)
        canonical = json.dumps(semantic, sort_keys=True,
                               separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def build_handles(config: RunConfig) -> PipelineHandles:
    """Instantiate every backend the config names."""
    def chat(block, oracle_cls):
        return oracle_cls() if block == _ORACLE else HttpChatBackend(block)

    if config.verifier == _ORACLE:
        verifier = OracleVerifier()
    else:
        verifier = HttpVideoQA(HttpChatBackend(config.verifier))
    if config.editor is None:
        editor = None
    elif config.editor == _ORACLE:
        editor = SceneWorldEditor(Path(config.output_dir) / "edits")
    else:
        editor = HttpEditorClient(config.editor)
    cache = None
    if config.cache_dir:
        cache = ResponseCache(config.cache_dir, config.replay_only)
    elif config.replay_only:
        raise ConfigError("replay_only needs a cache_dir")
    has_corrector = config.corrector is not None
    return PipelineHandles(
        extractor=chat(config.extractor, OracleExtractor),
        questioner=chat(config.questioner, OracleQuestioner),
        dependency=chat(config.dependency, OracleDependency),
        verifier=verifier,
        corrector=(chat(config.corrector, OracleTextCorrector)
                   if has_corrector else None),
        instructor=(chat(config.corrector, OracleEditInstructor)
                    if has_corrector else None),
        editor=editor,
        cache=cache,
        scoring=config.scoring,
        schedule=config.schedule,
        max_parallel=config.max_parallel,
    )


# ------------------------------------------------------------------ io

def _read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{line_no}: not JSON: {exc}") from exc
        if not isinstance(row, dict):
            raise ConfigError(f"{path}:{line_no}: row must be an object")
        rows.append(row)
    return rows


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")


def _field(row: dict, name: str, where: str):
    if name not in row:
        raise ConfigError(f"{where}: missing field {name!r}")
    return row[name]


def _record_from_row(row: dict, default_task: Task, where: str) -> EvalRecord:
    record_id = str(_field(row, "record_id", where))
    video_raw = _field(row, "video", where)
    if not isinstance(video_raw, Mapping):
        raise ConfigError(f"{where}: video must be an object")
    try:
        video = VideoRef(VideoKind(_field(video_raw, "kind", where)),
                         str(_field(video_raw, "locator", where)))
        task = Task(row.get("task", default_task.value))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return EvalRecord(record_id, task, str(_field(row, "text", where)),
                      video, row.get("query"))


def read_records(path: str | Path, default_task: Task) -> list[EvalRecord]:
    records = []
    seen: set[str] = set()
    for i, row in enumerate(_read_jsonl(path), start=1):
        record = _record_from_row(row, default_task, f"{path}:{i}")
        if record.record_id in seen:
            raise ConfigError(
                f"{path}:{i}: duplicate record_id {record.record_id!r}")
        seen.add(record.record_id)
        records.append(record)
    return records


def _record_to_row(record: EvalRecord) -> dict:
    return {
        "record_id": record.record_id,
        "task": record.task.value,
        "text": record.text,
        "query": record.query,
        "video": {"kind": record.video.kind.value,
                  "locator": record.video.locator},
    }


def _fact_to_dict(fact: FactTuple) -> dict:
    return {"id": fact.fact_id, "category": fact.category.value,
            "subtype": fact.subtype, "args": list(fact.args)}


def _fact_from_dict(data: Mapping, where: str) -> FactTuple:
    try:
        return FactTuple(int(data["id"]), FactCategory(data["category"]),
                         data["subtype"], tuple(data["args"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: bad fact entry: {exc}") from exc


def _diag_to_dict(diag: Diagnostic) -> dict:
    return {"kind": diag.kind.value, "severity": diag.severity.value,
            "line": diag.line_no, "message": diag.message}


def _questions_from_row(row: dict, where: str) -> list[QuestionRecord]:
    out = []
    for entry in _field(row, "questions", where):
        try:
            out.append(QuestionRecord(int(entry["id"]), entry["text"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: bad question entry: {exc}") from exc
    return out


def _deps_from_row(row: dict, where: str) -> dict[int, tuple[int, ...]]:
    deps = {}
    for key, parents in _field(row, "deps", where).items():
        try:
            deps[int(key)] = tuple(int(p) for p in parents)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: bad deps entry {key!r}") from exc
    return deps


def _facts_from_row(row: dict, where: str) -> FactSet:
    entries = _field(row, "facts", where)
    facts = FactSet(tuple(_fact_from_dict(e, where) for e in entries))
    if not len(facts):
        raise ConfigError(f"{where}: record has no facts")
    return facts


# ------------------------------------------------------------------ runs

def _timestamp(config: RunConfig) -> str | None:
    # replay runs must be byte-reproducible, so they carry no clock
    if config.replay_only:
        return None
    return datetime.now(timezone.utc).isoformat()


def _per_record(records: Sequence, worker, max_parallel: int):
    """Run worker over records, collecting (id, result) and (id, error)."""
    results: list[tuple[str, object]] = []
    failures: list[tuple[str, str]] = []

    def guarded(item):
        try:
            return item, worker(item), None
        except Exception as exc:
            return item, None, f"{type(exc).__name__}: {exc}"

    if max_parallel > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=max_parallel) as pool:
            outcomes = list(pool.map(guarded, records))
    else:
        outcomes = [guarded(record) for record in records]
    for item, result, error in outcomes:
        if isinstance(item, Mapping):
            record_id = str(item.get("record_id", ""))
        else:
            record_id = item.record_id
        if error is None:
            results.append((record_id, result))
        else:
            failures.append((record_id, error))
    return results, failures


def _summary_breakdown(reports: Iterable[dict]) -> dict:
    total: dict[str, dict[str, int]] = {}
    for report in reports:
        for bucket, cell in report.get("breakdown", {}).items():
            slot = total.setdefault(bucket, {"supported": 0, "total": 0})
            slot["supported"] += cell["supported"]
            slot["total"] += cell["total"]
    return total


def _finish_run(out_dir: Path, name: str, rows: list[dict],
                failures: list[tuple[str, str]], summary: dict) -> int:
    rows.sort(key=lambda r: r["record_id"])
    _write_jsonl(out_dir / f"{name}.jsonl", rows)
    if failures:
        _write_jsonl(out_dir / "failures.jsonl",
                     [{"record_id": rid, "error": err}
                      for rid, err in sorted(failures)])
    _write_json(out_dir / "summary.json", summary)
    return 1 if failures else 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args)
    handles = build_handles(config)
    records = read_records(args.records, config.task)
    config_hash = config.config_hash()

    def worker(record: EvalRecord) -> dict:
        artifacts = evaluate_record(record, handles)
        return {
            "record_id": record.record_id,
            "config_hash": config_hash,
            "report": artifacts.report.to_json_dict(),
        }

    results, failures = _per_record(records, worker, config.max_parallel)
    rows = [row for _, row in results]
    scored = [row["report"]["f_hat"] for row in rows
              if row["report"]["f_hat"] is not None]
    summary = {
        "n_records": len(records),
        "n_failures": len(failures),
        "mean_f_hat": sum(scored) / len(scored) if scored else None,
        "breakdown": _summary_breakdown(row["report"] for row in rows),
        "provenance": {"config_hash": config_hash,
                       "timestamp": _timestamp(config)},
    }
    out_dir = Path(config.output_dir)
    code = _finish_run(out_dir, "reports", rows, failures, summary)
    mean = summary["mean_f_hat"]
    print(f"records={len(records)} failures={len(failures)} "
          f"mean_f_hat={'n/a' if mean is None else f'{mean:.4f}'}")
    for bucket in sorted(summary["breakdown"]):
        cell = summary["breakdown"][bucket]
        print(f"  {bucket}: {cell['supported']}/{cell['total']}")
    return code


def cmd_correct(args: argparse.Namespace) -> int:
    config = _load_config(args)
    handles = build_handles(config)
    records = read_records(args.records, config.task)
    config_hash = config.config_hash()
    if args.max_rounds < 1:
        raise ConfigError("--max-rounds must be at least 1")
    # fail on the config up front, not per record mid-run
    tasks = {record.task for record in records}
    if config.corrector is None:
        raise ConfigError("correction needs a corrector backend")
    if Task.T2V in tasks and config.editor is None:
        raise ConfigError("t2v correction needs an editor backend")

    def worker(record: EvalRecord) -> dict:
        outcome = run_correction_loop(record, handles,
                                      max_rounds=args.max_rounds)
        revised = outcome.revised
        if isinstance(revised, VideoRef):
            revised = {"kind": revised.kind.value,
                       "locator": revised.locator}
        return {
            "record_id": record.record_id,
            "config_hash": config_hash,
            "pre_f_hat": outcome.pre_score.f_hat,
            "post_f_hat": (None if outcome.post_score is None
                           else outcome.post_score.f_hat),
            "rounds": outcome.rounds,
            "corrections": outcome.corrections,
            "edit_instruction": outcome.edit_instruction,
            "revised": revised,
        }

    results, failures = _per_record(records, worker, config.max_parallel)
    rows = [row for _, row in results]
    pre = [r["pre_f_hat"] for r in rows if r["pre_f_hat"] is not None]
    post = [r["post_f_hat"] for r in rows if r["post_f_hat"] is not None]
    summary = {
        "n_records": len(records),
        "n_failures": len(failures),
        "mean_pre_f_hat": sum(pre) / len(pre) if pre else None,
        "mean_post_f_hat": sum(post) / len(post) if post else None,
        "provenance": {"config_hash": config_hash,
                       "timestamp": _timestamp(config)},
    }
    out_dir = Path(config.output_dir)
    code = _finish_run(out_dir, "corrections", rows, failures, summary)
    print(f"records={len(records)} failures={len(failures)}")
    print(f"  without correction: "
          f"{_fmt(summary['mean_pre_f_hat'])}")
    print(f"  with correction:    "
          f"{_fmt(summary['mean_post_f_hat'])}")
    return code


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4f}"


# ------------------------------------------------------------------ stages

def cmd_extract(args: argparse.Namespace) -> int:
    from .gateway import extract_facts

    config = _load_config(args)
    handles = build_handles(config)
    records = read_records(args.records, config.task)

    def worker(record: EvalRecord) -> dict:
        facts, diags = extract_facts(
            record.text, record.task, handles.extractor,
            query=record.query, cache=handles.cache)
        row = _record_to_row(record)
        row["facts"] = [_fact_to_dict(f) for f in facts]
        row["diagnostics"] = [_diag_to_dict(d) for d in diags]
        return row

    results, failures = _per_record(records, worker, config.max_parallel)
    rows = [row for _, row in results]
    summary = {"n_records": len(records), "n_failures": len(failures),
               "provenance": {"config_hash": config.config_hash(),
                              "timestamp": _timestamp(config)}}
    code = _finish_run(Path(config.output_dir), "extract", rows, failures,
                       summary)
    print(f"extracted {len(rows)} records, {len(failures)} failures")
    return code


def cmd_graph(args: argparse.Namespace) -> int:
    from .gateway import generate_dependencies, generate_questions

    config = _load_config(args)
    handles = build_handles(config)
    in_rows = _read_jsonl(args.artifact)

    def worker(row: dict) -> dict:
        where = f"record {row.get('record_id')}"
        facts = _facts_from_row(row, where)
        text = str(_field(row, "text", where))
        questions, q_diags = generate_questions(
            facts, text, handles.questioner, cache=handles.cache)
        deps, d_diags = generate_dependencies(
            facts, text, handles.dependency, cache=handles.cache)
        graph, g_diags = build_graph(facts, deps, handles.cycle_policy)
        out = dict(row)
        out["questions"] = [{"id": q.fact_id, "text": q.text}
                            for q in questions]
        out["deps"] = {str(fid): list(graph.parents[fid])
                       for fid in graph.node_ids}
        out["nodes"] = len(graph)
        out["edges"] = graph.edge_count
        out["diagnostics"] = row.get("diagnostics", []) + [
            _diag_to_dict(d) for d in q_diags + d_diags + g_diags]
        dot_dir = Path(config.output_dir) / "dot"
        dot_dir.mkdir(parents=True, exist_ok=True)
        (dot_dir / f"{row['record_id']}.dot").write_text(
            graph.to_dot(), encoding="utf-8")
        return out

    results, failures = _per_record(in_rows, worker, config.max_parallel)
    rows = [row for _, row in results]
    summary = {"n_records": len(in_rows), "n_failures": len(failures),
               "provenance": {"config_hash": config.config_hash(),
                              "timestamp": _timestamp(config)}}
    code = _finish_run(Path(config.output_dir), "graph", rows, failures,
                       summary)
    print(f"graphed {len(rows)} records, {len(failures)} failures")
    return code


def cmd_verify(args: argparse.Namespace) -> int:
    config = _load_config(args)
    handles = build_handles(config)
    in_rows = _read_jsonl(args.artifact)

    def worker(row: dict) -> dict:
        where = f"record {row.get('record_id')}"
        facts = _facts_from_row(row, where)
        questions = _questions_from_row(row, where)
        deps = _deps_from_row(row, where)
        graph, _ = build_graph(facts, deps, handles.cycle_policy)
        video_raw = _field(row, "video", where)
        video = VideoRef(VideoKind(video_raw["kind"]),
                         video_raw["locator"])
        result = gateway_verify(
            video, facts, questions, graph, handles.verifier,
            cache=handles.cache, schedule=handles.schedule,
            max_parallel=handles.max_parallel)
        out = dict(row)
        out["verdicts"] = {str(fid): verdict.value
                           for fid, verdict in result.verdicts.items()}
        out["calls"] = result.calls
        out["verify_errors"] = {str(fid): err
                                for fid, err in result.errors.items()}
        return out

    results, failures = _per_record(in_rows, worker, config.max_parallel)
    rows = [row for _, row in results]
    summary = {"n_records": len(in_rows), "n_failures": len(failures),
               "provenance": {"config_hash": config.config_hash(),
                              "timestamp": _timestamp(config)}}
    code = _finish_run(Path(config.output_dir), "verify", rows, failures,
                       summary)
    print(f"verified {len(rows)} records, {len(failures)} failures")
    return code


def cmd_score(args: argparse.Namespace) -> int:
    config = _load_config(args)
    config_hash = config.config_hash()
    in_rows = _read_jsonl(args.artifact)

    def worker(row: dict) -> dict:
        where = f"record {row.get('record_id')}"
        facts = _facts_from_row(row, where)
        questions = _questions_from_row(row, where)
        deps = _deps_from_row(row, where)
        graph, _ = build_graph(facts, deps, CyclePolicy.BREAK)
        verdict_map = {}
        for key, value in _field(row, "verdicts", where).items():
            try:
                verdict_map[int(key)] = Verdict(value)
            except ValueError as exc:
                raise ConfigError(f"{where}: bad verdict {value!r}") from exc
        if not verdict_map:
            raise EmptyUniverse(f"{where}: no verdicts to score")
        report = score_verdicts(facts, graph, verdict_map, config.scoring,
                                questions=questions)
        return {
            "record_id": row["record_id"],
            "config_hash": config_hash,
            "report": report.to_json_dict(),
        }

    results, failures = _per_record(in_rows, worker, config.max_parallel)
    rows = [row for _, row in results]
    scored = [row["report"]["f_hat"] for row in rows
              if row["report"]["f_hat"] is not None]
    summary = {
        "n_records": len(in_rows),
        "n_failures": len(failures),
        "mean_f_hat": sum(scored) / len(scored) if scored else None,
        "breakdown": _summary_breakdown(row["report"] for row in rows),
        "provenance": {"config_hash": config_hash,
                       "timestamp": _timestamp(config)},
    }
    code = _finish_run(Path(config.output_dir), "reports", rows, failures,
                       summary)
    print(f"scored {len(rows)} records, {len(failures)} failures, "
          f"mean_f_hat={_fmt(summary['mean_f_hat'])}")
    return code


# ------------------------------------------------------------------ meta

def _read_csv(path: str | Path) -> tuple[list[str], list[dict]]:
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames is None:
                raise ConfigError(f"{path}: empty csv")
            return list(reader.fieldnames), list(reader)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _id_column(fields: list[str], path: str) -> str:
    if "record_id" in fields:
        return "record_id"
    if not fields:
        raise ConfigError(f"{path}: no columns")
    return fields[0]


def cmd_metaeval(args: argparse.Namespace) -> int:
    config = _load_config(args)
    score_fields, score_rows = _read_csv(args.scores)
    human_fields, human_rows = _read_csv(args.human)
    score_id = _id_column(score_fields, args.scores)
    human_id = _id_column(human_fields, args.human)
    value_fields = [f for f in human_fields if f != human_id]
    if not value_fields:
        raise ConfigError(f"{args.human}: no judgment column")
    human_col = value_fields[0]

    human_map: dict[str, float] = {}
    for row in human_rows:
        try:
            human_map[row[human_id]] = float(row[human_col])
        except (TypeError, ValueError):
            continue

    metric_cols = [f for f in score_fields if f != score_id]
    if not metric_cols:
        raise ConfigError(f"{args.scores}: no metric columns")

    joined = [row for row in score_rows if row[score_id] in human_map]
    unmatched = sorted({row[score_id] for row in score_rows}
                       - set(human_map))
    if len(joined) < 3:
        raise ConfigError(
            f"need at least 3 joined rows, got {len(joined)}; "
            f"unmatched ids: {unmatched}")

    table: dict[str, dict] = {}
    for metric in metric_cols:
        xs, ys = [], []
        for row in joined:
            try:
                value = float(row[metric])
            except (TypeError, ValueError):
                continue
            xs.append(value)
            ys.append(human_map[row[score_id]])
        if len(xs) < 3:
            table[metric] = {"error": f"only {len(xs)} usable rows"}
            continue
        try:
            summary = correlation_summary(xs, ys)
        except DegenerateVariance as exc:
            table[metric] = {"error": str(exc)}
            continue
        table[metric] = summary.to_json_dict()

    out = {
        "human_column": human_col,
        "n_joined": len(joined),
        "unmatched_ids": unmatched,
        "metrics": table,
        "provenance": {"config_hash": config.config_hash(),
                       "timestamp": _timestamp(config)},
    }
    _write_json(Path(config.output_dir) / "metaeval.json", out)
    print(f"joined {len(joined)} rows against {human_col!r}")
    for metric in sorted(table):
        cell = table[metric]
        if "error" in cell:
            print(f"  {metric}: {cell['error']}")
        else:
            print(f"  {metric}: pearson={cell['pearson']:+.4f} "
                  f"spearman={cell['spearman']:+.4f} "
                  f"kendall={cell['kendall']:+.4f}")
    return 0


# ------------------------------------------------------------------ main

def _load_config(args: argparse.Namespace) -> RunConfig:
    config = (RunConfig.from_file(args.config) if args.config
              else RunConfig())
    overrides: dict = {}
    if args.task:
        overrides["task"] = Task(args.task)
    if args.schedule:
        overrides["schedule"] = Schedule(args.schedule)
    if args.replay_only:
        overrides["replay_only"] = True
    if args.max_parallel is not None:
        overrides["max_parallel"] = args.max_parallel
    if args.out:
        overrides["output_dir"] = args.out
    if args.cache_dir:
        overrides["cache_dir"] = args.cache_dir
    scoring_overrides: dict = {}
    if args.propagation:
        scoring_overrides["propagation"] = args.propagation
    if args.invalid:
        scoring_overrides["invalid_handling"] = args.invalid
    if scoring_overrides:
        base = config.scoring.to_dict()
        base.update(scoring_overrides)
        overrides["scoring"] = ScoringConfig.from_dict(base)
    if overrides:
        config = replace(config, **overrides)
    if config.max_parallel < 1:
        raise ConfigError("max_parallel must be at least 1")
    return config


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration file")
    parser.add_argument("--task", choices=[t.value for t in Task])
    parser.add_argument("--schedule",
                        choices=[s.value for s in Schedule])
    parser.add_argument("--propagation",
                        choices=["direct", "transitive"])
    parser.add_argument("--invalid", choices=["zero", "exclude"])
    parser.add_argument("--replay-only", action="store_true",
                        dest="replay_only")
    parser.add_argument("--max-parallel", type=int, dest="max_parallel")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--cache-dir", dest="cache_dir",
                        help="content-addressed response cache directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidfaith",
        description="Reference-free faithfulness evaluation for "
                    "text/video pairs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_eval = sub.add_parser("eval", help="run the full pipeline")
    p_eval.add_argument("records", help="JSONL manifest of records")
    _add_common_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_extract = sub.add_parser("extract", help="extraction stage only")
    p_extract.add_argument("records")
    _add_common_flags(p_extract)
    p_extract.set_defaults(func=cmd_extract)

    p_graph = sub.add_parser("graph",
                             help="questions + dependency graph stage")
    p_graph.add_argument("artifact", help="extract.jsonl from cmd_extract")
    _add_common_flags(p_graph)
    p_graph.set_defaults(func=cmd_graph)

    p_verify = sub.add_parser("verify", help="verification stage only")
    p_verify.add_argument("artifact", help="graph.jsonl from cmd_graph")
    _add_common_flags(p_verify)
    p_verify.set_defaults(func=cmd_verify)

    p_score = sub.add_parser("score", help="scoring stage only")
    p_score.add_argument("artifact", help="verify.jsonl from cmd_verify")
    _add_common_flags(p_score)
    p_score.set_defaults(func=cmd_score)

    p_correct = sub.add_parser("correct", help="repair loop per record")
    p_correct.add_argument("records")
    p_correct.add_argument("--max-rounds", type=int, default=1,
                           dest="max_rounds")
    _add_common_flags(p_correct)
    p_correct.set_defaults(func=cmd_correct)

    p_meta = sub.add_parser("metaeval",
                            help="correlate metrics with human judgment")
    p_meta.add_argument("scores", help="CSV: record_id + metric columns")
    p_meta.add_argument("human", help="CSV: record_id + judgment column")
    _add_common_flags(p_meta)
    p_meta.set_defaults(func=cmd_metaeval)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except VidFaithError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
