"""Rank-then-group partitioning of an image's top-k descriptions.

The first m ranked descriptions form the head group, which is summarized
into the lead pseudo sentence. The remaining k-m descriptions are ranked
by similarity to that lead sentence and sliced into n = (k-m)/m
consecutive blocks, one per further pseudo sentence. This is rank-and-
slice, not clustering.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .fluency import tokenize
from .retrieval import TopK


@dataclass(frozen=True)
class GroupingPlan:
    """Disjoint head + tail groups tiling an image's TopK id set."""

    image_id: str
    head: tuple[str, ...]
    tail_groups: tuple[tuple[str, ...], ...]
    m: int
    k: int

    @property
    def n(self) -> int:
        return len(self.tail_groups)

    def __post_init__(self):
        covered = list(self.head) + [id_ for g in self.tail_groups for id_ in g]
        if len(covered) != len(set(covered)):
            raise ValueError("grouping plan has overlapping groups")

    def all_groups(self) -> list[tuple[str, ...]]:
        return [self.head, *self.tail_groups]


def validate_group_sizes(k: int, m: int) -> int:
    """Check k >= m >= 1 and divisibility; return n = (k-m)/m."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if k < m:
        raise ValueError(f"k ({k}) must be >= m ({m})")
    if (k - m) % m != 0:
        raise ValueError(f"(k - m) must be divisible by m, got k={k}, m={m}")
    return (k - m) // m


def select_head(topk: TopK, m: int) -> tuple[str, ...]:
    """The first m ids of the TopK, in rank order."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if m > len(topk.entries):
        raise ValueError(
            f"m ({m}) exceeds available descriptions ({len(topk.entries)})"
        )
    return tuple(id_ for id_, _ in topk.entries[:m])


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(a @ b) / denom


def partition_remainder(
    topk: TopK,
    head: Sequence[str],
    c1_embedding: np.ndarray,
    desc_embeddings: Mapping[str, np.ndarray] | Callable[[str], np.ndarray],
) -> GroupingPlan:
    """Slice the k-m remaining descriptions into blocks of m.

    The remainder is sorted by cosine similarity to the lead-sentence
    embedding, descending, ties broken by ascending retrieval rank; each
    consecutive block of m ids becomes one tail group.
    """
    head = tuple(head)
    k = len(topk.entries)
    m = len(head)
    validate_group_sizes(k, m)
    head_set = set(head)
    remainder = [id_ for id_, _ in topk.entries if id_ not in head_set]

    if callable(desc_embeddings):
        lookup = desc_embeddings
    else:
        def lookup(id_: str, _table=desc_embeddings) -> np.ndarray:
            try:
                return _table[id_]
            except KeyError:
                raise KeyError(f"no embedding for description {id_!r}") from None

    sims = {id_: cosine(c1_embedding, lookup(id_)) for id_ in remainder}
    # remainder is already in retrieval-rank order, so a stable sort on
    # -similarity implements the rank tie-break.
    ordered = sorted(remainder, key=lambda id_: -sims[id_])
    tail_groups = tuple(
        tuple(ordered[i : i + m]) for i in range(0, len(ordered), m)
    )
    return GroupingPlan(
        image_id=topk.image_id, head=head, tail_groups=tail_groups, m=m, k=k
    )


def collapse_duplicate_texts(
    ids: Sequence[str], text_of: Callable[[str], str]
) -> list[str]:
    """Drop ids whose exact text already appeared earlier in the group.

    Duplicates add no content and skew the extractive summarizer, so only
    the highest-ranked copy survives.
    """
    seen: set[str] = set()
    kept = []
    for id_ in ids:
        text = text_of(id_)
        if text in seen:
            continue
        seen.add(text)
        kept.append(id_)
    return kept


class HashSentenceEmbedder:
    """Deterministic stand-in for a neural sentence encoder.

    Each token maps to a pseudo-random unit-scale vector seeded by the
    SHA-256 of the token; a sentence embeds as the normalized sum, so
    token overlap translates into cosine similarity. Stable across runs
    and platforms.
    """

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._token_cache.get(token)
        if vec is None:
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "little")
            vec = np.random.default_rng(seed).standard_normal(self.dim)
            self._token_cache[token] = vec
        return vec

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            vec = np.zeros(self.dim)
            vec[0] = 1.0
            return vec
        total = np.zeros(self.dim)
        for token in tokens:
            total += self._token_vector(token)
        norm = np.linalg.norm(total)
        if norm == 0.0:
            total[:] = 0.0
            total[0] = 1.0
            return total
        return total / norm
