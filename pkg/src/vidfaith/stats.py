"""Correlation and coverage statistics for benchmarking runs.

Plain-Python implementations so the numbers are auditable: no numpy, no
scipy. Sizes here are benchmark-shaped (tens to a few thousand pairs),
well inside what the quadratic tau needs.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

from .types import VidFaithError

__all__ = [
    "DegenerateVariance",
    "CorrelationSummary",
    "CoverageSummary",
    "pearson",
    "spearman",
    "kendall_tau",
    "rank_data",
    "correlation_summary",
    "question_precision_recall",
]


class DegenerateVariance(VidFaithError):
    """A correlation was requested over a constant or too-short vector."""


def _check_pair(xs: Sequence[float], ys: Sequence[float]) -> None:
    if len(xs) != len(ys):
        raise ValueError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise DegenerateVariance("need at least two observations")


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Linear correlation coefficient."""
    _check_pair(xs, ys)
    n = len(xs)
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    sxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    syy = math.fsum((y - my) ** 2 for y in ys)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateVariance("constant input has no correlation")
    return sxy / math.sqrt(sxx * syy)


def rank_data(xs: Sequence[float]) -> list[float]:
    """Ascending ranks starting at 1; ties share their mean rank."""
    order = sorted(range(len(xs)), key=lambda i: xs[i])
    ranks = [0.0] * len(xs)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        mean_rank = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Rank correlation: pearson over mean ranks."""
    _check_pair(xs, ys)
    return pearson(rank_data(xs), rank_data(ys))


def kendall_tau(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Tau-b, the tie-corrected variant. Quadratic and fine for it."""
    _check_pair(xs, ys)
    n = len(xs)
    concordant = discordant = ties_x = ties_y = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = xs[i] - xs[j]
            dy = ys[i] - ys[j]
            if dx == 0 and dy == 0:
                continue
            if dx == 0:
                ties_x += 1
            elif dy == 0:
                ties_y += 1
            elif (dx > 0) == (dy > 0):
                concordant += 1
            else:
                discordant += 1
    denom_x = concordant + discordant + ties_x
    denom_y = concordant + discordant + ties_y
    if denom_x == 0 or denom_y == 0:
        raise DegenerateVariance("constant input has no correlation")
    return (concordant - discordant) / math.sqrt(denom_x * denom_y)


@dataclass(frozen=True)
class CorrelationSummary:
    """All three coefficients over one paired sample."""

    n: int
    pearson: float
    spearman: float
    kendall: float

    def to_json_dict(self) -> dict:
        return {"n": self.n, "pearson": self.pearson,
                "spearman": self.spearman, "kendall": self.kendall}

    def render(self) -> str:
        return (f"n={self.n} pearson={self.pearson:+.4f} "
                f"spearman={self.spearman:+.4f} "
                f"kendall={self.kendall:+.4f}")


def correlation_summary(xs: Sequence[float],
                        ys: Sequence[float]) -> CorrelationSummary:
    return CorrelationSummary(len(xs), pearson(xs, ys), spearman(xs, ys),
                              kendall_tau(xs, ys))


@dataclass(frozen=True)
class CoverageSummary:
    """How well a question set covers a fact set.

    Built from a boolean match matrix: ``matches[i][j]`` says fact ``i``
    is probed by question ``j``. Precision reads columns (questions that
    probe anything), recall reads rows (facts probed by anything).
    """

    n_facts: int
    n_questions: int
    precision: float
    recall: float

    def to_json_dict(self) -> dict:
        return {"n_facts": self.n_facts, "n_questions": self.n_questions,
                "precision": self.precision, "recall": self.recall}

    def render(self) -> str:
        return (f"facts={self.n_facts} questions={self.n_questions} "
                f"precision={self.precision:.4f} recall={self.recall:.4f}")


def question_precision_recall(
        matches: Sequence[Sequence[bool]]) -> CoverageSummary:
    n_facts = len(matches)
    n_questions = len(matches[0]) if matches else 0
    for row in matches:
        if len(row) != n_questions:
            raise ValueError("ragged match matrix")
    if n_questions == 0 or n_facts == 0:
        raise ValueError("empty match matrix")
    useful = sum(1 for j in range(n_questions)
                 if any(matches[i][j] for i in range(n_facts)))
    covered = sum(1 for row in matches if any(row))
    return CoverageSummary(n_facts, n_questions,
                           useful / n_questions, covered / n_facts)
