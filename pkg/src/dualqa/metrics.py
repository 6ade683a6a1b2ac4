"""Evaluation metrics: MAP / MRR / P@1 for ranking, corpus-level BLEU-4.

All ranking metrics use one tie rule repo-wide: candidates sort by score
descending, ties broken by original index ascending.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

__all__ = [
    "RankedQuery",
    "ranked_order",
    "mean_average_precision",
    "mean_reciprocal_rank",
    "precision_at_1",
    "bleu4",
]


def ranked_order(scores) -> list[int]:
    """Indices sorted by score descending; ties keep the lower index first."""
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


@dataclass
class RankedQuery:
    """Candidate scores and gold labels for one query."""

    scores: list[float]
    labels: list[int]

    def __post_init__(self):
        if not self.scores:
            raise ValueError("query has no candidates")
        if len(self.scores) != len(self.labels):
            raise ValueError(
                f"scores and labels differ in length: {len(self.scores)} vs {len(self.labels)}"
            )
        if any(l not in (0, 1) for l in self.labels):
            raise ValueError("labels must be 0 or 1")
        if not any(self.labels):
            raise ValueError("query has no positive candidate")

    def ranked_labels(self) -> list[int]:
        return [self.labels[i] for i in ranked_order(self.scores)]


def _require_queries(queries):
    if not queries:
        raise ValueError("no queries")


def mean_average_precision(queries: list[RankedQuery]) -> float:
    """Mean over queries of AP = mean over positive ranks r of
    (positives at ranks <= r) / r."""
    _require_queries(queries)
    total = 0.0
    for q in queries:
        labels = q.ranked_labels()
        hits = 0
        ap = 0.0
        for rank, label in enumerate(labels, start=1):
            if label == 1:
                hits += 1
                ap += hits / rank
        total += ap / hits
    return total / len(queries)


def mean_reciprocal_rank(queries: list[RankedQuery]) -> float:
    _require_queries(queries)
    total = 0.0
    for q in queries:
        labels = q.ranked_labels()
        total += 1.0 / (labels.index(1) + 1)
    return total / len(queries)


def precision_at_1(queries: list[RankedQuery]) -> float:
    _require_queries(queries)
    return sum(q.ranked_labels()[0] for q in queries) / len(queries)


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates: list[list[str]], references: list[list[str]]) -> float:
    """Corpus-level BLEU-4 with a single reference per candidate.

    Clipped n-gram matches for n = 1..4 are pooled over the whole corpus,
    combined by geometric mean, and multiplied by the brevity penalty
    exp(1 - r/c) when the candidate corpus is shorter than the reference
    corpus.  Any pooled precision of zero gives a score of zero.  No
    smoothing.
    """
    if len(candidates) != len(references):
        raise ValueError(
            f"candidates and references differ in length: {len(candidates)} vs {len(references)}"
        )
    if not candidates:
        raise ValueError("empty corpus")
    matches = [0] * 4
    totals = [0] * 4
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, 5):
            cand_counts = _ngram_counts(cand, n)
            ref_counts = _ngram_counts(ref, n)
            totals[n - 1] += max(len(cand) - n + 1, 0)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
    if any(t == 0 or m == 0 for m, t in zip(matches, totals)):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4.0
    brevity = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_precision)
