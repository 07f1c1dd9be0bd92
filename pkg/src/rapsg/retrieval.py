"""Exact cosine-similarity scoring and top-k ranking of descriptions.

All scoring is brute-force over the full corpus: no index, no
approximation, so every downstream stage sees a deterministic ranking.
Ties are broken by ascending file order of the description store, which
is stable across runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .store import EmbeddingStore


@dataclass(frozen=True)
class RankedDescriptions:
    """Full ordering of a description corpus for one image."""

    image_id: str
    entries: tuple[tuple[str, float], ...]  # (description_id, score), descending


@dataclass(frozen=True)
class TopK:
    """The k-prefix of a :class:`RankedDescriptions`."""

    image_id: str
    k: int
    entries: tuple[tuple[str, float], ...]

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(id_ for id_, _ in self.entries)


def cosine_scores(query: np.ndarray, store: EmbeddingStore) -> list[tuple[str, float]]:
    """Dot-product scores of a unit query against every store row.

    Accumulation is float64 regardless of storage precision.
    """
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != store.dim:
        raise ValueError(
            f"query dimension {query.shape[0]} != store dimension {store.dim}"
        )
    scores = store.vectors.astype(np.float64) @ query
    return [(id_, float(s)) for id_, s in zip(store.ids, scores)]


def _descending_order(scores: np.ndarray) -> np.ndarray:
    # Stable sort on the negated scores keeps file order within tie groups.
    return np.argsort(-scores, kind="stable")


def rank_descriptions(
    image_id: str, image_store: EmbeddingStore, desc_store: EmbeddingStore
) -> RankedDescriptions:
    """Rank the whole description corpus for one image, scores descending."""
    if image_id not in image_store:
        raise KeyError(f"unknown image id {image_id!r}")
    if image_store.dim != desc_store.dim:
        raise ValueError(
            f"image store dimension {image_store.dim} != "
            f"description store dimension {desc_store.dim}"
        )
    query = image_store.row(image_id).astype(np.float64)
    scores = desc_store.vectors.astype(np.float64) @ query
    order = _descending_order(scores)
    entries = tuple((desc_store.ids[i], float(scores[i])) for i in order)
    return RankedDescriptions(image_id=image_id, entries=entries)


def take_top_k(ranked: RankedDescriptions, k: int) -> TopK:
    """Prefix of length min(k, corpus size)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return TopK(image_id=ranked.image_id, k=k, entries=ranked.entries[:k])


def rank_all(
    image_store: EmbeddingStore, desc_store: EmbeddingStore, k: int
) -> list[TopK]:
    """TopK for every image in store order.

    Scores each image with the same matrix-vector product as
    :func:`rank_descriptions`, so batched and per-image paths produce
    bit-identical scores (a fused matmul would differ in the last ulp).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if image_store.dim != desc_store.dim:
        raise ValueError(
            f"image store dimension {image_store.dim} != "
            f"description store dimension {desc_store.dim}"
        )
    dense = desc_store.vectors.astype(np.float64)
    results = []
    for image_id in image_store.ids:
        scores = dense @ image_store.row(image_id).astype(np.float64)
        order = _descending_order(scores)[:k]
        entries = tuple((desc_store.ids[i], float(scores[i])) for i in order)
        results.append(TopK(image_id=image_id, k=k, entries=entries))
    return results
