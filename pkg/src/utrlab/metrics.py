"""Recall-oriented ROUGE-N on token sequences, pooled corpus scores and success rates."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass


@dataclass(frozen=True)
class RougeScore:
    n: int
    recall_percent: float
    matched: int = 0
    total: int = 0


def _ngrams(tokens, n: int) -> Counter:
    tokens = list(tokens)
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _counts(candidate, reference, n: int) -> tuple[int, int]:
    ref = _ngrams(reference, n)
    cand = _ngrams(candidate, n)
    matched = sum(min(c, cand[g]) for g, c in ref.items())
    return matched, sum(ref.values())


def rouge_n(candidate, reference, n: int) -> RougeScore:
    if n not in (1, 2):
        raise ValueError(f"n must be 1 or 2; got {n}")
    if len(reference) < n:
        raise ValueError(f"reference has {len(reference)} tokens, fewer than n={n}")
    matched, total = _counts(candidate, reference, n)
    return RougeScore(n, 100.0 * matched / total, matched, total)


def match_candidates(candidates, references) -> list[int | None]:
    """Greedy one-to-one pairing by ROUGE-1; returns a candidate index (or None) per reference.

    Pairs are taken in order of decreasing R-1, ties broken by (reference,
    candidate) index.  References that are empty never match.
    """
    scores = []
    for ri, ref in enumerate(references):
        if not ref:
            continue
        for ci, cand in enumerate(candidates):
            scores.append((-rouge_n(cand, ref, 1).recall_percent, ri, ci))
    scores.sort()
    assigned: list[int | None] = [None] * len(references)
    used = set()
    for neg, ri, ci in scores:
        if assigned[ri] is not None or ci in used or neg == 0:
            continue
        assigned[ri] = ci
        used.add(ci)
    return assigned


def corpus_rouge(candidates, references, n: int) -> float:
    """Pooled ROUGE-N after greedy pairing; unmatched references count as zero recall.

    References shorter than ``n`` contribute nothing to either sum.  Returns
    ``nan`` if no reference has ``n`` tokens.
    """
    if not references:
        raise ValueError("corpus_rouge needs at least one reference")
    if n not in (1, 2):
        raise ValueError(f"n must be 1 or 2; got {n}")
    pairing = match_candidates(candidates, references)
    matched = total = 0
    for ref, ci in zip(references, pairing):
        if len(ref) < n:
            continue
        if ci is None:
            total += sum(_ngrams(ref, n).values())
            continue
        m, t = _counts(candidates[ci], ref, n)
        matched += m
        total += t
    if total == 0:
        return float("nan")
    return 100.0 * matched / total


def attack_success_rate(reports, threshold: float = 99.0) -> float:
    """Fraction of runs whose corpus ROUGE-1 reaches ``threshold``.

    ``reports`` may hold :class:`~utrlab.utr.AttackReport` objects or bare R-1 numbers.
    """
    if not 0 <= threshold <= 100:
        raise ValueError(f"threshold must lie in [0, 100]; got {threshold}")
    reports = list(reports)
    if not reports:
        raise ValueError("no reports given")
    r1 = [getattr(r, "rouge1", r) for r in reports]
    return sum(1 for v in r1 if v >= threshold) / len(r1)
