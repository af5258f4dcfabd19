"""Evaluation metrics for extractive span prediction.

Spans are (start, end) token-index pairs with inclusive ends.  Span F1
counts overlap over token POSITIONS, not token strings: in an extractive
setting two spans overlap exactly where their position sets intersect.
BLEU is corpus-level with clipped n-gram precisions pooled over the whole
corpus and no smoothing.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

Span = tuple[int, int]


def _as_span(s) -> Span:
    # Accept bare tuples or anything exposing .start/.end (SpanPrediction).
    if hasattr(s, "start") and hasattr(s, "end"):
        return int(s.start), int(s.end)
    a, b = s
    return int(a), int(b)


def _check_paired(preds, golds):
    if len(preds) == 0:
        raise ValueError("metrics need at least one example")
    if len(preds) != len(golds):
        raise ValueError(f"got {len(preds)} predictions for {len(golds)} golds")


def position_accuracy(preds: Sequence, golds: Sequence) -> tuple[float, float]:
    """Fraction of exactly-matching start indices and end indices."""
    _check_paired(preds, golds)
    pairs = [(_as_span(p), _as_span(g)) for p, g in zip(preds, golds)]
    start_acc = sum(p[0] == g[0] for p, g in pairs) / len(pairs)
    end_acc = sum(p[1] == g[1] for p, g in pairs) / len(pairs)
    return start_acc, end_acc


def span_f1(pred, gold) -> float:
    """Position-overlap F1 of a single pred/gold span pair.

    P = |overlap| / |pred|, R = |overlap| / |gold|; 0 when disjoint.
    """
    ps, pe = _as_span(pred)
    gs, ge = _as_span(gold)
    overlap = min(pe, ge) - max(ps, gs) + 1
    if overlap <= 0:
        return 0.0
    precision = overlap / (pe - ps + 1)
    recall = overlap / (ge - gs + 1)
    return 2.0 * precision * recall / (precision + recall)


def span_f1_macro(preds: Sequence, golds: Sequence) -> float:
    _check_paired(preds, golds)
    return sum(span_f1(p, g) for p, g in zip(preds, golds)) / len(preds)


def exact_match(preds: Sequence, golds: Sequence) -> float:
    """Fraction of examples where both endpoints match the gold span."""
    _check_paired(preds, golds)
    return sum(_as_span(p) == _as_span(g) for p, g in zip(preds, golds)) / len(preds)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Corpus BLEU with clipped pooled n-gram precisions, no smoothing.

    Orders run from 1 up to 4 but only orders for which at least one
    candidate is long enough participate; weights are uniform over the
    participating orders.  BP = 1 if c > r else exp(1 - r/c).  An empty
    candidate is legal (it just shortens c); an empty reference is not.
    """
    if len(candidates) != len(references):
        raise ValueError(f"got {len(candidates)} candidates for {len(references)} references")
    for i, ref in enumerate(references):
        if len(ref) == 0:
            raise ValueError(f"reference {i} is empty")

    c_total = sum(len(c) for c in candidates)
    r_total = sum(len(r) for r in references)
    if c_total == 0:
        return 0.0

    log_sum = 0.0
    orders = 0
    for n in range(1, 5):
        matched = 0
        possible = 0
        for cand, ref in zip(candidates, references):
            cand_ngrams = _ngrams(cand, n)
            if not cand_ngrams:
                continue
            ref_ngrams = _ngrams(ref, n)
            possible += sum(cand_ngrams.values())
            matched += sum(min(count, ref_ngrams[g]) for g, count in cand_ngrams.items())
        if possible == 0:
            continue  # every candidate shorter than n
        if matched == 0:
            return 0.0  # a participating precision is zero: no smoothing
        log_sum += math.log(matched / possible)
        orders += 1

    if orders == 0:
        return 0.0
    geo = math.exp(log_sum / orders)
    bp = 1.0 if c_total > r_total else math.exp(1.0 - r_total / c_total)
    return bp * geo


@dataclass
class MetricsReport:
    """Aggregated evaluation results; all values lie in [0, 1]."""

    start_accuracy: float
    end_accuracy: float
    span_f1: float
    exact_match: float
    bleu: float
    n_examples: int

    CSV_HEADER = "start_accuracy,end_accuracy,span_f1,exact_match,bleu,n_examples"

    def __post_init__(self):
        if self.n_examples < 1:
            raise ValueError("a MetricsReport needs at least one example")
        for name in ("start_accuracy", "end_accuracy", "span_f1", "exact_match", "bleu"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps({
            "start_accuracy": self.start_accuracy,
            "end_accuracy": self.end_accuracy,
            "span_f1": self.span_f1,
            "exact_match": self.exact_match,
            "bleu": self.bleu,
            "n_examples": self.n_examples,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, payload: str) -> "MetricsReport":
        return cls(**json.loads(payload))

    def to_csv_row(self) -> str:
        return (f"{self.start_accuracy},{self.end_accuracy},{self.span_f1},"
                f"{self.exact_match},{self.bleu},{self.n_examples}")


def compute_report(preds: Sequence, golds: Sequence,
                   candidates: Iterable[Sequence] | None = None,
                   references: Iterable[Sequence] | None = None) -> MetricsReport:
    """Bundle every metric over an evaluation set.

    ``candidates``/``references`` are the token lists BLEU scores (for this
    char-level system, lists of answer characters); both or neither must be
    given.  Without them BLEU is computed from span positions, which is
    equivalent whenever pred and gold spans index the same context.
    """
    _check_paired(preds, golds)
    start_acc, end_acc = position_accuracy(preds, golds)
    if (candidates is None) != (references is None):
        raise ValueError("pass both candidates and references, or neither")
    if candidates is None:
        candidates = [_position_tokens(p) for p in preds]
        references = [_position_tokens(g) for g in golds]
    bleu_score = bleu(list(candidates), list(references))
    return MetricsReport(
        start_accuracy=start_acc,
        end_accuracy=end_acc,
        span_f1=span_f1_macro(preds, golds),
        exact_match=exact_match(preds, golds),
        bleu=bleu_score,
        n_examples=len(preds),
    )


def _position_tokens(span) -> list[int]:
    s, e = _as_span(span)
    return list(range(s, e + 1))
