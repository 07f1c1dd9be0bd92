"""Pseudo-sentence generation behind a pluggable summarizer boundary.

Two backends implement one interface: an HTTP client speaking the wire
protocol of an external summarization service, and a built-in extractive
fallback that is a pure function of its inputs, so CI and offline runs
are fully deterministic.

Extractive fallback rules (fixed; conformance goldens depend on them):

* summarize: walk the descriptions in rank order. Emit the tokens of
  each description that did not occur in any EARLIER description, then
  mark all of its tokens as seen. Repeats inside a single description
  are preserved, so a lone description round-trips unchanged.
* refine: start from all prediction tokens, then append description
  tokens the same way.
* Both truncate to ``max_tokens`` and join with single spaces. Tokens
  come from the shared pipeline tokenizer.
"""

from __future__ import annotations

import logging
import time
import uuid
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import requests

from .errors import BackendError, BackendProtocolError
from .fluency import tokenize

log = logging.getLogger(__name__)

DEFAULT_MAX_TOKENS = 20
RETRY_ATTEMPTS = 3
RETRY_BACKOFF_S = 0.25
REQUEST_TIMEOUT_S = 30.0

KIND_SUMMARIZE = "summarize"
KIND_REFINE = "refine"


@dataclass(frozen=True)
class SummarizationRequest:
    kind: str
    descriptions: tuple[str, ...]
    seed: int
    max_tokens: int = DEFAULT_MAX_TOKENS
    prediction: str | None = None

    def __post_init__(self):
        if self.kind not in (KIND_SUMMARIZE, KIND_REFINE):
            raise ValueError(f"unknown request kind {self.kind!r}")
        object.__setattr__(self, "descriptions", tuple(self.descriptions))
        if not self.descriptions:
            raise ValueError("descriptions must be non-empty")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if (self.prediction is None) == (self.kind == KIND_REFINE):
            raise ValueError("prediction is required exactly when kind is 'refine'")


@dataclass(frozen=True)
class Provenance:
    kind: str
    groups: tuple[int, ...]
    backend: str
    seed: int


@dataclass(frozen=True)
class PseudoSentenceSet:
    """The ordered candidate sentences for one image, with provenance."""

    image_id: str
    sentences: tuple[str, ...]
    provenance: tuple[Provenance, ...]

    def __post_init__(self):
        if not self.sentences:
            raise ValueError("candidate set is empty")
        if len(self.sentences) != len(self.provenance):
            raise ValueError("one provenance record per sentence required")
        if any(not s for s in self.sentences):
            raise ValueError("candidate sentences must be non-empty")


class SummarizerBackend(Protocol):
    name: str

    def run(self, request: SummarizationRequest) -> str: ...


def extractive_summary(descriptions: Sequence[str], max_tokens: int) -> str:
    out: list[str] = []
    seen: set[str] = set()
    for desc in descriptions:
        tokens = tokenize(desc)
        out.extend(tok for tok in tokens if tok not in seen)
        seen.update(tokens)
        if len(out) >= max_tokens:
            break
    return " ".join(out[:max_tokens])


def extractive_refine(
    prediction: str, descriptions: Sequence[str], max_tokens: int
) -> str:
    out = tokenize(prediction)
    seen = set(out)
    for desc in descriptions:
        tokens = tokenize(desc)
        out.extend(tok for tok in tokens if tok not in seen)
        seen.update(tokens)
        if len(out) >= max_tokens:
            break
    return " ".join(out[:max_tokens])


class FallbackBackend:
    """Deterministic extractive summarizer; ignores the seed by design."""

    name = "fallback"

    def run(self, request: SummarizationRequest) -> str:
        if request.kind == KIND_REFINE:
            return extractive_refine(
                request.prediction, request.descriptions, request.max_tokens
            )
        return extractive_summary(request.descriptions, request.max_tokens)


class HttpBackend:
    """Wire-protocol client with bounded retries and exponential backoff.

    POST /v1/summarize and /v1/refine with JSON bodies; 3 attempts per
    request, backoff starting at 250 ms, 30 s per-request timeout.
    """

    name = "http"

    def __init__(
        self,
        base_url: str,
        timeout: float = REQUEST_TIMEOUT_S,
        attempts: int = RETRY_ATTEMPTS,
        backoff: float = RETRY_BACKOFF_S,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self._sleep = sleep

    def health(self) -> dict:
        resp = requests.get(f"{self.base_url}/v1/health", timeout=self.timeout)
        resp.raise_for_status()
        return resp.json()

    def run(self, request: SummarizationRequest) -> str:
        body: dict = {
            "descriptions": list(request.descriptions),
            "seed": request.seed,
            "max_tokens": request.max_tokens,
        }
        if request.kind == KIND_REFINE:
            body["prediction"] = request.prediction
        url = f"{self.base_url}/v1/{request.kind}"
        request_id = uuid.uuid4().hex[:12]
        last_error = "no attempt made"
        for attempt in range(self.attempts):
            if attempt:
                self._sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                resp = requests.post(url, json=body, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = f"transport error: {exc}"
                log.warning("backend attempt %d/%d failed: %s",
                            attempt + 1, self.attempts, last_error)
                continue
            if resp.status_code == 200:
                return self._parse_summary(resp, request_id)
            if 400 <= resp.status_code < 500:
                # Client errors are not retryable: the request itself is bad.
                raise BackendProtocolError(
                    f"backend rejected request: {self._error_message(resp)}",
                    request_id,
                )
            last_error = f"HTTP {resp.status_code}: {self._error_message(resp)}"
            log.warning("backend attempt %d/%d failed: %s",
                        attempt + 1, self.attempts, last_error)
        raise BackendError(
            f"backend failed after {self.attempts} attempts: {last_error}", request_id
        )

    @staticmethod
    def _error_message(resp: requests.Response) -> str:
        try:
            err = resp.json().get("error", {})
            return f"{err.get('code', '?')}: {err.get('message', resp.text[:200])}"
        except ValueError:
            return resp.text[:200]

    @staticmethod
    def _parse_summary(resp: requests.Response, request_id: str) -> str:
        try:
            payload = resp.json()
        except ValueError:
            raise BackendProtocolError("backend returned non-JSON body", request_id)
        summary = payload.get("summary")
        if not isinstance(summary, str) or not summary:
            raise BackendProtocolError("backend returned an empty summary", request_id)
        return summary


def make_backend(spec: str, **kwargs) -> SummarizerBackend:
    """'fallback' or a service base URL."""
    if spec == "fallback":
        return FallbackBackend()
    if spec.startswith("http://") or spec.startswith("https://"):
        return HttpBackend(spec, **kwargs)
    raise ValueError(f"backend must be 'fallback' or an http(s) URL, got {spec!r}")


def summarize_group(request: SummarizationRequest, backend: SummarizerBackend) -> str:
    if request.kind != KIND_SUMMARIZE:
        raise ValueError(f"expected a summarize request, got kind {request.kind!r}")
    return backend.run(request)


def refine(request: SummarizationRequest, backend: SummarizerBackend) -> str:
    if request.kind != KIND_REFINE:
        raise ValueError(f"expected a refine request, got kind {request.kind!r}")
    if request.prediction is None:
        raise ValueError("refine requires a prediction")
    return backend.run(request)
