"""Service launcher: `python -m rapsg_service` or the rapsg-service script."""

from __future__ import annotations

import argparse
import json
import sys

from .app import DEFAULT_PROMPT_TEMPLATE, ServiceConfig, create_app


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rapsg-service", description=__doc__)
    parser.add_argument("--mode", choices=("echo", "model"), default="echo")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8080)
    parser.add_argument("--summarize-model", default="facebook/bart-large-cnn")
    parser.add_argument("--refine-model", default="meta-llama/Llama-2-7b-hf")
    parser.add_argument("--prompt-template", default=DEFAULT_PROMPT_TEMPLATE)
    parser.add_argument("--temperature", type=float, default=0.7)
    parser.add_argument("--beam-size", type=int, default=1)
    parser.add_argument("--max-new-tokens", type=int, default=48)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = ServiceConfig(
        mode=args.mode,
        summarize_model=args.summarize_model,
        refine_model=args.refine_model,
        prompt_template=args.prompt_template,
        temperature=args.temperature,
        beam_size=args.beam_size,
        max_new_tokens=args.max_new_tokens,
    )
    try:
        app = create_app(config)
    except (RuntimeError, ValueError) as exc:
        print(json.dumps({"error": {"code": "startup_failure",
                                    "message": str(exc)}}), file=sys.stderr)
        return 1

    import uvicorn

    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    sys.exit(main())
