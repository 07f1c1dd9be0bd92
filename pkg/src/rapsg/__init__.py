"""Deterministic pseudo-caption generation from retrieved region descriptions.

The pipeline retrieves the most relevant region descriptions per image by
cosine similarity, groups and summarizes them into candidate pseudo
sentences, optionally refines them with a generative backend, selects the
best candidate with a consensus-metric filter, and exports contrastive
guidance losses, emitting a training dataset plus a resumable run manifest.
"""

__version__ = "0.1.0"
