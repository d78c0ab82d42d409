"""Reference-free faithfulness evaluation for video/text pairs.

Extracts typed facts from a caption or prompt, builds a dependency graph
over per-fact verification questions, answers them against the video,
and aggregates dependency-aware scores into one faithfulness value.
"""

from .correction import (
    CorrectionResult,
    EvaluationArtifacts,
    PipelineHandles,
    evaluate_record,
    run_correction_loop,
)
from .dsl import (
    ParseFailure,
    parse_dependency_block,
    parse_fact_block,
    parse_question_block,
    render_fact_block,
)
from .gateway import (
    BackendConfig,
    ResponseCache,
    Schedule,
    extract_facts,
    generate_dependencies,
    generate_questions,
    verify,
)
from .graph import CyclePolicy, Stsdg, build_graph
from .scoring import (
    EmptyUniverse,
    FaithfulnessReport,
    ScoringConfig,
    score_verdicts,
)
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
    normalize_answer,
)

__version__ = "0.1.0"

__all__ = [
    "BackendConfig",
    "CorrectionResult",
    "CyclePolicy",
    "EmptyUniverse",
    "EvalRecord",
    "EvaluationArtifacts",
    "FactCategory",
    "FactSet",
    "FactTuple",
    "FaithfulnessReport",
    "ParseFailure",
    "PipelineHandles",
    "QuestionRecord",
    "ResponseCache",
    "Schedule",
    "ScoringConfig",
    "Stsdg",
    "Task",
    "Verdict",
    "VideoKind",
    "VideoRef",
    "VidFaithError",
    "build_graph",
    "evaluate_record",
    "extract_facts",
    "generate_dependencies",
    "generate_questions",
    "normalize_answer",
    "parse_dependency_block",
    "parse_fact_block",
    "parse_question_block",
    "render_fact_block",
    "run_correction_loop",
    "score_verdicts",
    "verify",
]
