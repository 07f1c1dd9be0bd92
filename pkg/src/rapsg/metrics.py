"""Corpus-level BLEU-1..4 and ROUGE-L against arbitrary reference files.

Shares the fluency filter's tokenizer, so the selection metric and the
reporting metrics see identical token streams. BLEU uses clipped n-gram
precision with the exp(1 - r/c) brevity penalty; the effective reference
length per sentence is the closest to the candidate length, shorter on
ties. ROUGE-L is the LCS F-measure with the conventional beta^2 = 1.2,
best reference per sentence, averaged over the corpus.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .fluency import ngram_counts, tokenize

ROUGE_BETA_SQ = 1.2


@dataclass(frozen=True)
class CorpusScore:
    bleu: tuple[float, float, float, float]
    rouge_l: float
    sentence_count: int


def _check_lengths(candidates: Sequence[str], references: Sequence[Sequence[str]]):
    if len(candidates) != len(references):
        raise ValueError(
            f"{len(candidates)} candidates but {len(references)} reference lists"
        )
    if not candidates:
        raise ValueError("empty corpus")
    for i, refs in enumerate(references):
        if not refs:
            raise ValueError(f"candidate {i} has no references")


def bleu(
    candidates: Sequence[str],
    references: Sequence[Sequence[str]],
    max_n: int = 4,
) -> tuple[float, ...]:
    """Corpus BLEU-n for n = 1..max_n."""
    _check_lengths(candidates, references)
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_tokens = tokenize(cand)
        ref_tokens = [tokenize(r) for r in refs]
        cand_len += len(cand_tokens)
        # Closest reference length; ties go to the shorter reference.
        ref_len += min(
            (len(r) for r in ref_tokens),
            key=lambda L: (abs(L - len(cand_tokens)), L),
        )
        for n in range(1, max_n + 1):
            counts = ngram_counts(cand_tokens, n)
            if not counts:
                continue
            clip: Counter = Counter()
            for r in ref_tokens:
                r_counts = ngram_counts(r, n)
                for gram, c in r_counts.items():
                    clip[gram] = max(clip[gram], c)
            matched[n - 1] += sum(min(c, clip[g]) for g, c in counts.items())
            total[n - 1] += sum(counts.values())

    if cand_len == 0:
        return tuple(0.0 for _ in range(max_n))
    brevity = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    precisions = [
        (matched[i] / total[i]) if total[i] else 0.0 for i in range(max_n)
    ]
    scores = []
    for n in range(1, max_n + 1):
        if any(precisions[i] == 0.0 for i in range(n)):
            scores.append(0.0)
            continue
        log_mean = sum(math.log(precisions[i]) for i in range(n)) / n
        scores.append(brevity * math.exp(log_mean))
    return tuple(scores)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for tok_a in a:
        cur = [0] * (len(b) + 1)
        for j, tok_b in enumerate(b, start=1):
            if tok_a == tok_b:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def _rouge_l_pair(cand: Sequence[str], ref: Sequence[str]) -> float:
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return ((1.0 + ROUGE_BETA_SQ) * recall * precision) / (
        recall + ROUGE_BETA_SQ * precision
    )


def rouge_l(
    candidates: Sequence[str], references: Sequence[Sequence[str]]
) -> float:
    """Mean best-reference LCS F-score over the corpus."""
    _check_lengths(candidates, references)
    total = 0.0
    for cand, refs in zip(candidates, references):
        cand_tokens = tokenize(cand)
        total += max(_rouge_l_pair(cand_tokens, tokenize(r)) for r in refs)
    return total / len(candidates)


def score_corpus(
    candidates: Sequence[str], references: Sequence[Sequence[str]]
) -> CorpusScore:
    return CorpusScore(
        bleu=tuple(bleu(candidates, references)),
        rouge_l=rouge_l(candidates, references),
        sentence_count=len(candidates),
    )
