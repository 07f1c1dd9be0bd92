"""Candidate scoring with a from-scratch CIDEr implementation.

Every candidate pseudo sentence is scored against the captioner's
prediction (the single reference) and the argmax wins, lowest index on
ties. The default variant is CIDEr-D: TF-IDF n-gram cosine per n in 1..4
with reference-clipped candidate counts and a Gaussian length penalty,
averaged over n and references, scaled by 10. Plain CIDEr (no clipping,
no penalty) is available behind a flag.

The tokenizer defined here is shared by the reporting metrics and the
extractive summarizer so that all text stages see one token stream.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

MAX_NGRAM = 4
DEFAULT_SIGMA = 6.0

_NON_ALNUM = re.compile(r"[^a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, map every char outside [a-z0-9] to space, split."""
    return [tok for tok in _NON_ALNUM.split(text.lower()) if tok]


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class NGramProfile:
    """Term frequencies for n = 1..4 plus the token length."""

    counts: tuple[Counter, ...]
    length: int

    @classmethod
    def from_text(cls, text: str) -> "NGramProfile":
        tokens = tokenize(text)
        return cls(
            counts=tuple(ngram_counts(tokens, n) for n in range(1, MAX_NGRAM + 1)),
            length=len(tokens),
        )


@dataclass(frozen=True)
class IdfTable:
    """Document frequencies per n-gram over a reference corpus.

    Unknown n-grams are treated as having document frequency 1, so their
    idf is log(doc_count) rather than a log of zero.
    """

    df: tuple[Mapping[tuple, int], ...]
    doc_count: int

    def idf(self, gram: tuple) -> float:
        n = len(gram)
        df = self.df[n - 1].get(gram, 1)
        return math.log(self.doc_count / max(df, 1))


def build_idf(corpus: Sequence[str]) -> IdfTable:
    """df(g) = number of corpus sentences containing g at least once."""
    if not corpus:
        raise ValueError("idf corpus is empty")
    df: list[dict] = [{} for _ in range(MAX_NGRAM)]
    for sentence in corpus:
        profile = NGramProfile.from_text(sentence)
        for n_idx in range(MAX_NGRAM):
            for gram in profile.counts[n_idx]:
                df[n_idx][gram] = df[n_idx].get(gram, 0) + 1
    return IdfTable(df=tuple(df), doc_count=len(corpus))


def _tfidf_vector(counts: Counter, idf: IdfTable) -> tuple[dict, float]:
    vec = {gram: tf * idf.idf(gram) for gram, tf in counts.items()}
    norm = math.sqrt(sum(w * w for w in vec.values()))
    return vec, norm


def cider_d(
    candidate: str,
    references: Sequence[str],
    idf: IdfTable,
    sigma: float = DEFAULT_SIGMA,
    clipped: bool = True,
    length_penalty: bool = True,
) -> float:
    """Consensus score of a candidate against reference sentences, in [0, 10].

    With the default flags this is CIDEr-D; passing ``clipped=False,
    length_penalty=False`` gives plain CIDEr. An empty candidate scores 0.
    """
    if not references:
        raise ValueError("references must be non-empty")
    cand = NGramProfile.from_text(candidate)
    if cand.length == 0:
        return 0.0

    total = 0.0
    for reference in references:
        ref = NGramProfile.from_text(reference)
        per_n = 0.0
        for n_idx in range(MAX_NGRAM):
            c_vec, c_norm = _tfidf_vector(cand.counts[n_idx], idf)
            r_vec, r_norm = _tfidf_vector(ref.counts[n_idx], idf)
            if c_norm == 0.0 or r_norm == 0.0:
                continue
            if clipped:
                num = sum(
                    min(w, r_vec[g]) * r_vec[g] for g, w in c_vec.items() if g in r_vec
                )
            else:
                num = sum(w * r_vec[g] for g, w in c_vec.items() if g in r_vec)
            val = num / (c_norm * r_norm)
            if length_penalty:
                delta = float(cand.length - ref.length)
                val *= math.exp(-(delta * delta) / (2.0 * sigma * sigma))
            per_n += val
        total += per_n / MAX_NGRAM
    score = 10.0 * total / len(references)
    # The math keeps the score in [0, 10]; clamp only guards float dust.
    return min(max(score, 0.0), 10.0)


@dataclass(frozen=True)
class FilterResult:
    """Per-image scores for all candidates plus the argmax selection."""

    image_id: str
    scores: tuple[float, ...]
    selected_index: int
    selected_sentence: str


def select_best(
    image_id: str,
    candidates: Sequence[str],
    prediction: str,
    idf: IdfTable,
    sigma: float = DEFAULT_SIGMA,
    clipped: bool = True,
    length_penalty: bool = True,
) -> FilterResult:
    """Score every candidate against the prediction and pick the argmax.

    Ties resolve to the lowest candidate index: earlier candidates come
    from higher-relevance groups, so they are the safer default.
    """
    if not candidates:
        raise ValueError("candidate set is empty")
    if not tokenize(prediction):
        raise ValueError("prediction tokenizes to nothing")
    scores = tuple(
        cider_d(c, [prediction], idf, sigma=sigma, clipped=clipped,
                length_penalty=length_penalty)
        for c in candidates
    )
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return FilterResult(
        image_id=image_id,
        scores=scores,
        selected_index=best,
        selected_sentence=candidates[best],
    )
