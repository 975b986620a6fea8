"""ROUGE-1/2/L on token sequences.

ROUGE-n uses clipped n-gram overlap counts; ROUGE-L uses the length of the
longest common subsequence.  Empty inputs produce zero scores, never NaN.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

from .errors import DegenerateInputError

VARIANTS = ("rouge1", "rouge2", "rougeL")


@dataclass
class RougeScore:
    precision: float
    recall: float
    f1: float


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[Hashable], reference: Sequence[Hashable],
            n: int) -> RougeScore:
    """Clipped n-gram overlap precision/recall/F1."""
    if n < 1:
        raise ValueError(f"rouge_n needs n >= 1, got {n}")
    cand = _ngrams(candidate, n)
    ref = _ngrams(reference, n)
    overlap = sum((cand & ref).values())
    total_cand = sum(cand.values())
    total_ref = sum(ref.values())
    precision = overlap / total_cand if total_cand else 0.0
    recall = overlap / total_ref if total_ref else 0.0
    return RougeScore(precision, recall, _f1(precision, recall))


def _lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    # dynamic programming over two rows
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[Hashable], reference: Sequence[Hashable]) -> RougeScore:
    """Longest-common-subsequence precision/recall/F1."""
    lcs = _lcs_length(candidate, reference)
    precision = lcs / len(candidate) if len(candidate) else 0.0
    recall = lcs / len(reference) if len(reference) else 0.0
    return RougeScore(precision, recall, _f1(precision, recall))


def score_pair(candidate: Sequence[Hashable],
               reference: Sequence[Hashable]) -> dict[str, RougeScore]:
    return {
        "rouge1": rouge_n(candidate, reference, 1),
        "rouge2": rouge_n(candidate, reference, 2),
        "rougeL": rouge_l(candidate, reference),
    }


def corpus_rouge(pairs: Sequence[tuple[Sequence[Hashable], Sequence[Hashable]]]
                 ) -> dict[str, RougeScore]:
    """Arithmetic mean of per-pair precision/recall/F1 for each variant."""
    if not pairs:
        raise DegenerateInputError("corpus_rouge over an empty pair list")
    per_pair = [score_pair(c, r) for c, r in pairs]
    out: dict[str, RougeScore] = {}
    n = len(per_pair)
    for key in VARIANTS:
        out[key] = RougeScore(
            sum(s[key].precision for s in per_pair) / n,
            sum(s[key].recall for s in per_pair) / n,
            sum(s[key].f1 for s in per_pair) / n,
        )
    return out
