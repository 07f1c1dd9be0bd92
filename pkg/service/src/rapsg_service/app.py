"""HTTP application implementing the summarize/refine wire protocol.

Endpoints (JSON bodies, UTF-8):

    GET  /v1/health     -> {"status": "ok", "mode": "model"|"echo"}
    POST /v1/summarize  {descriptions, seed, max_tokens} -> {"summary": str}
    POST /v1/refine     {prediction, descriptions, seed, max_tokens} -> same

All request problems come back as 400 with {"error": {"code", "message"}};
backend failures as 500 in the same shape. Request bodies are validated
by hand so the error contract stays exact across framework versions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .echo import echo_refine, echo_summarize

log = logging.getLogger(__name__)

DEFAULT_PROMPT_TEMPLATE = (
    "Summarize the core idea of: {prediction}. "
    "Incorporate specific details from: {descriptions}. One sentence."
)


@dataclass
class ServiceConfig:
    mode: str = "echo"
    summarize_model: str = "facebook/bart-large-cnn"
    refine_model: str = "meta-llama/Llama-2-7b-hf"
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE
    temperature: float = 0.7
    beam_size: int = 1
    max_new_tokens: int = 48
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.mode not in ("echo", "model"):
            raise ValueError(f"mode must be 'echo' or 'model', got {self.mode!r}")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")


class EchoEngine:
    mode = "echo"

    def summarize(self, descriptions, seed, max_tokens):
        return echo_summarize(descriptions, max_tokens)

    def refine(self, prediction, descriptions, seed, max_tokens):
        return echo_refine(prediction, descriptions, max_tokens)


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(
        status_code=status, content={"error": {"code": code, "message": message}}
    )


class _BadRequest(Exception):
    def __init__(self, code: str, message: str):
        self.code = code
        self.message = message


def _parse_common(body) -> tuple[list[str], int, int]:
    if not isinstance(body, dict):
        raise _BadRequest("invalid_request", "body must be a JSON object")
    descriptions = body.get("descriptions")
    if (
        not isinstance(descriptions, list)
        or not descriptions
        or not all(isinstance(d, str) for d in descriptions)
    ):
        raise _BadRequest(
            "invalid_descriptions", "descriptions must be a non-empty string array"
        )
    seed = body.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise _BadRequest("invalid_seed", "seed must be an unsigned 64-bit integer")
    max_tokens = body.get("max_tokens", 20)
    if not isinstance(max_tokens, int) or isinstance(max_tokens, bool) or max_tokens < 1:
        raise _BadRequest("invalid_max_tokens", "max_tokens must be a positive integer")
    return descriptions, seed, max_tokens


def create_app(config: ServiceConfig | None = None, engine=None) -> FastAPI:
    config = config or ServiceConfig()
    config.validate()
    if engine is None:
        if config.mode == "echo":
            engine = EchoEngine()
        else:
            from .models import ModelEngine

            engine = ModelEngine(config)

    app = FastAPI(title="rapsg-service", docs_url=None, redoc_url=None)

    @app.get("/v1/health")
    async def health():
        return {"status": "ok", "mode": engine.mode}

    async def _body(request: Request):
        try:
            return await request.json()
        except Exception:
            raise _BadRequest("invalid_json", "request body is not valid JSON")

    @app.post("/v1/summarize")
    async def summarize(request: Request):
        try:
            body = await _body(request)
            descriptions, seed, max_tokens = _parse_common(body)
        except _BadRequest as exc:
            return _error(400, exc.code, exc.message)
        try:
            summary = engine.summarize(descriptions, seed, max_tokens)
        except Exception as exc:  # engine failure must not leak a traceback
            log.exception("summarize failed")
            return _error(500, "engine_failure", str(exc))
        return {"summary": summary}

    @app.post("/v1/refine")
    async def refine(request: Request):
        try:
            body = await _body(request)
            descriptions, seed, max_tokens = _parse_common(body)
            prediction = body.get("prediction")
            if not isinstance(prediction, str) or not prediction:
                raise _BadRequest(
                    "invalid_prediction", "prediction must be a non-empty string"
                )
        except _BadRequest as exc:
            return _error(400, exc.code, exc.message)
        try:
            summary = engine.refine(prediction, descriptions, seed, max_tokens)
        except Exception as exc:
            log.exception("refine failed")
            return _error(500, "engine_failure", str(exc))
        return {"summary": summary}

    return app
