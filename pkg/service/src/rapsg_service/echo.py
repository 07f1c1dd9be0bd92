"""Extractive echo summarizer: the offline fallback algorithm, verbatim.

This must stay bit-for-bit compatible with the pipeline's built-in
fallback; the cross-component conformance suite pins it against the
shared golden file. Rules:

* tokens: lowercase, any char outside [a-z0-9] becomes a space, split;
* summarize: walk descriptions in order, emit tokens unseen in earlier
  descriptions (repeats inside one description survive);
* refine: start from all prediction tokens, then append as above;
* truncate to max_tokens, join with single spaces.
"""

from __future__ import annotations

import re
from typing import Sequence

_NON_ALNUM = re.compile(r"[^a-z0-9]+")


def tokens(text: str) -> list[str]:
    return [tok for tok in _NON_ALNUM.split(text.lower()) if tok]


def echo_summarize(descriptions: Sequence[str], max_tokens: int) -> str:
    out: list[str] = []
    seen: set[str] = set()
    for description in descriptions:
        toks = tokens(description)
        out.extend(tok for tok in toks if tok not in seen)
        seen.update(toks)
        if len(out) >= max_tokens:
            break
    return " ".join(out[:max_tokens])


def echo_refine(prediction: str, descriptions: Sequence[str], max_tokens: int) -> str:
    out = tokens(prediction)
    seen = set(out)
    for description in descriptions:
        toks = tokens(description)
        out.extend(tok for tok in toks if tok not in seen)
        seen.update(toks)
        if len(out) >= max_tokens:
            break
    return " ".join(out[:max_tokens])
