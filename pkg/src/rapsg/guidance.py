"""Batched InfoNCE loss, its analytic gradient, and the CLIP-S score.

The loss is image-anchored: row i of the affinity matrix is image i
against every text in the batch, the diagonal being the positive key.
Gradients are taken with respect to the embedding rows exactly as given;
re-normalization belongs to the caller's layer. A symmetric
(text-anchored) term can be averaged in behind a flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TAU = 0.07
_ROW_NORM_TOLERANCE = 1e-4  # loose enough for finite-difference probes


@dataclass(frozen=True)
class GuidanceBatch:
    """Paired image/text embedding rows with a softmax temperature."""

    image_embeddings: np.ndarray
    text_embeddings: np.ndarray
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        img = np.asarray(self.image_embeddings, dtype=np.float64)
        txt = np.asarray(self.text_embeddings, dtype=np.float64)
        if img.ndim != 2 or txt.ndim != 2:
            raise ValueError("embedding batches must be 2-D matrices")
        if img.shape != txt.shape:
            raise ValueError(
                f"image batch {img.shape} and text batch {txt.shape} must match"
            )
        if img.shape[0] < 1:
            raise ValueError("batch is empty")
        if not (np.isfinite(img).all() and np.isfinite(txt).all()):
            raise ValueError("embeddings contain non-finite values")
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        for name, mat in (("image", img), ("text", txt)):
            norms = np.linalg.norm(mat, axis=1)
            worst = float(np.abs(norms - 1.0).max())
            if worst > _ROW_NORM_TOLERANCE:
                raise ValueError(
                    f"{name} rows must be unit-normalized "
                    f"(worst deviation {worst:.2e})"
                )
        object.__setattr__(self, "image_embeddings", img)
        object.__setattr__(self, "text_embeddings", txt)

    @property
    def size(self) -> int:
        return int(self.image_embeddings.shape[0])

    @property
    def dim(self) -> int:
        return int(self.image_embeddings.shape[1])


def affinity_matrix(batch: GuidanceBatch) -> np.ndarray:
    """A[i][j] = dot(image_i, text_j) / tau."""
    return (batch.image_embeddings @ batch.text_embeddings.T) / batch.tau


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    shifted = a - a.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def infonce_loss(
    batch: GuidanceBatch, symmetric: bool = False
) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Mean cross-entropy of each anchor against its positive key.

    Returns the loss and the analytic gradients with respect to the image
    and text matrices. Computed with the log-sum-exp max-shift, so a
    batch of one is exactly zero and uniform affinities give exactly
    ln(batch size).
    """
    a = affinity_matrix(batch)
    b = batch.size
    shifted = a - a.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - np.diagonal(shifted)))

    p = _softmax_rows(a)
    # d loss / d A = (softmax - identity) / B for the image-anchored term.
    g = (p - np.eye(b)) / b
    if symmetric:
        p_t = _softmax_rows(a.T)
        shifted_t = a.T - a.T.max(axis=1, keepdims=True)
        lse_t = np.log(np.exp(shifted_t).sum(axis=1))
        loss_t = float(np.mean(lse_t - np.diagonal(shifted_t)))
        loss = 0.5 * (loss + loss_t)
        g = 0.5 * (g + ((p_t - np.eye(b)) / b).T)
    grad_images = g @ batch.text_embeddings / batch.tau
    grad_texts = g.T @ batch.image_embeddings / batch.tau
    return loss, (grad_images, grad_texts)


def clip_s(image_embedding: np.ndarray, text_embedding: np.ndarray) -> float:
    """Reference-free relevance: 2.5 * max(cosine, 0), in [0, 2.5]."""
    img = np.asarray(image_embedding, dtype=np.float64).reshape(-1)
    txt = np.asarray(text_embedding, dtype=np.float64).reshape(-1)
    if img.shape != txt.shape:
        raise ValueError(
            f"dimension mismatch: {img.shape[0]} vs {txt.shape[0]}"
        )
    return 2.5 * max(float(img @ txt), 0.0)
