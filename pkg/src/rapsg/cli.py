"""Command-line interface: one subcommand per pipeline stage plus run/resume.

Exit codes: 0 success, 1 usage or configuration error, 2 malformed input
file, 3 backend failure after retries, 4 partial failure (some images
errored; dataset and manifest were still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import BackendError, ConfigError, InputFormatError, RapsgError
from .fluency import build_idf, select_best
from .grouping import (
    HashSentenceEmbedder,
    collapse_duplicate_texts,
    partition_remainder,
    select_head,
    validate_group_sizes,
)
from .guidance import GuidanceBatch, infonce_loss
from .metrics import score_corpus
from .pipeline import (
    ENV_BACKEND_URL,
    DATASET_FILENAME,
    MANIFEST_FILENAME,
    PipelineConfig,
    build_config,
    config_from_file,
    resume,
    run_pipeline,
)
from .retrieval import TopK, rank_all
from .store import (
    EmbeddingStore,
    l2_normalize,
    load_catalog,
    load_id_list,
    load_store,
    overlap_filter,
    save_store,
)
from .summarize import (
    KIND_REFINE,
    KIND_SUMMARIZE,
    DEFAULT_MAX_TOKENS,
    SummarizationRequest,
    make_backend,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_BACKEND = 3
EXIT_PARTIAL = 4


class _Parser(argparse.ArgumentParser):
    """argparse maps usage errors to exit 2; this package reserves 2 for
    malformed inputs, so usage problems are rerouted through ConfigError."""

    def error(self, message):
        raise ConfigError(message)


def _read_jsonl(path: str) -> list[dict]:
    records = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise InputFormatError(f"cannot open {path}: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            if not isinstance(obj, dict):
                raise InputFormatError(f"{path}:{lineno}: expected a JSON object")
            records.append(obj)
    return records


def _write_jsonl(path: str, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obj in records:
            fh.write(json.dumps(obj, ensure_ascii=True, separators=(",", ":")) + "\n")


def _require(obj: dict, field: str, where: str):
    if field not in obj:
        raise InputFormatError(f"{where}: missing field {field!r}")
    return obj[field]


def _backend_spec(arg_value: str | None) -> str:
    return arg_value or os.environ.get(ENV_BACKEND_URL) or "fallback"


# --------------------------------------------------------------------------
# subcommand handlers


def _cmd_retrieve(args) -> int:
    image_store = l2_normalize(load_store(args.images))
    desc_store = l2_normalize(load_store(args.descriptions))
    catalog = load_catalog(args.catalog)
    catalog.validate_against(desc_store)
    if args.exclude_images:
        catalog = overlap_filter(catalog, load_id_list(args.exclude_images))
    corpus = desc_store.subset(catalog.entries.keys())
    records = []
    for topk in rank_all(image_store, corpus, args.k):
        records.append({
            "image_id": topk.image_id,
            "topk": [{"desc_id": i, "score": s} for i, s in topk.entries],
        })
    _write_jsonl(args.out, records)
    print(f"retrieved top-{args.k} for {len(records)} images -> {args.out}")
    return EXIT_OK


def _topk_from_record(obj: dict, where: str) -> TopK:
    entries = tuple(
        (str(e["desc_id"]), float(e["score"]))
        for e in _require(obj, "topk", where)
    )
    return TopK(image_id=str(_require(obj, "image_id", where)), k=len(entries),
                entries=entries)


def _cmd_group(args) -> int:
    topk_records = _read_jsonl(args.topk)
    sentence_store = None
    catalog = None
    backend = None
    embedder = None
    if args.c1_embeddings:
        sentence_store = l2_normalize(load_store(args.c1_embeddings))
    else:
        if not args.catalog:
            raise ConfigError("--catalog is required unless --c1-embeddings is given")
        catalog = load_catalog(args.catalog)
        backend = make_backend(_backend_spec(args.backend))
        embedder = HashSentenceEmbedder(dim=args.hash_dim)

    records = []
    for lineno, obj in enumerate(topk_records, start=1):
        where = f"{args.topk}:{lineno}"
        topk = _topk_from_record(obj, where)
        validate_group_sizes(len(topk.entries), args.m)
        head = select_head(topk, args.m)
        if sentence_store is not None:
            if topk.image_id not in sentence_store:
                raise InputFormatError(
                    f"{where}: no lead-sentence row for image {topk.image_id!r} "
                    f"in {args.c1_embeddings}"
                )
            c1_vec = sentence_store.row(topk.image_id)
            desc_vec = sentence_store.row
        else:
            head_texts = [
                catalog.text(i) for i in collapse_duplicate_texts(head, catalog.text)
            ]
            c1 = backend.run(SummarizationRequest(
                kind=KIND_SUMMARIZE, descriptions=head_texts, seed=args.seed,
                max_tokens=args.max_tokens,
            ))
            c1_vec = embedder.embed(c1)

            def desc_vec(desc_id, _cat=catalog, _emb=embedder):
                return _emb.embed(_cat.text(desc_id))

        plan = partition_remainder(topk, head, c1_vec, desc_vec)
        records.append({
            "image_id": topk.image_id,
            "head": list(plan.head),
            "tail_groups": [list(g) for g in plan.tail_groups],
        })
    _write_jsonl(args.out, records)
    print(f"grouped {len(records)} images (m={args.m}) -> {args.out}")
    return EXIT_OK


def _cmd_summarize(args) -> int:
    groups = _read_jsonl(args.groups)
    catalog = load_catalog(args.catalog)
    backend = make_backend(_backend_spec(args.backend))
    records = []
    for lineno, obj in enumerate(groups, start=1):
        where = f"{args.groups}:{lineno}"
        image_id = str(_require(obj, "image_id", where))
        head = [str(i) for i in _require(obj, "head", where)]
        tail_groups = [[str(i) for i in g] for g in _require(obj, "tail_groups", where)]
        candidates = []
        for idx, group in enumerate([head, *tail_groups]):
            texts = [
                catalog.text(i)
                for i in collapse_duplicate_texts(group, catalog.text)
            ]
            sentence = backend.run(SummarizationRequest(
                kind=KIND_SUMMARIZE, descriptions=texts, seed=args.seed,
                max_tokens=args.max_tokens,
            ))
            candidates.append({
                "text": sentence, "kind": KIND_SUMMARIZE, "groups": [idx],
                "backend": backend.name, "seed": args.seed,
            })
        records.append({"image_id": image_id, "candidates": candidates})
    _write_jsonl(args.out, records)
    print(f"summarized {len(records)} images -> {args.out}")
    return EXIT_OK


def _predictions_by_image(path: str) -> dict[str, str]:
    out = {}
    for lineno, obj in enumerate(_read_jsonl(path), start=1):
        where = f"{path}:{lineno}"
        image_id = str(_require(obj, "image_id", where))
        if image_id in out:
            raise InputFormatError(f"{where}: duplicate image_id {image_id!r}")
        out[image_id] = str(_require(obj, "prediction", where))
    return out


def _cmd_refine(args) -> int:
    candidate_records = _read_jsonl(args.candidates)
    topk_by_image = {}
    for lineno, obj in enumerate(_read_jsonl(args.topk), start=1):
        topk = _topk_from_record(obj, f"{args.topk}:{lineno}")
        topk_by_image[topk.image_id] = topk
    catalog = load_catalog(args.catalog)
    predictions = _predictions_by_image(args.predictions)
    backend = make_backend(_backend_spec(args.backend))

    records = []
    for lineno, obj in enumerate(candidate_records, start=1):
        where = f"{args.candidates}:{lineno}"
        image_id = str(_require(obj, "image_id", where))
        if image_id not in topk_by_image:
            raise InputFormatError(f"{where}: image {image_id!r} missing from topk file")
        if image_id not in predictions:
            raise InputFormatError(
                f"{where}: image {image_id!r} missing from predictions file"
            )
        refined = backend.run(SummarizationRequest(
            kind=KIND_REFINE,
            descriptions=[catalog.text(i) for i in topk_by_image[image_id].ids],
            seed=args.seed,
            max_tokens=args.max_tokens,
            prediction=predictions[image_id],
        ))
        candidates = list(_require(obj, "candidates", where))
        candidates.append({
            "text": refined, "kind": KIND_REFINE, "groups": [],
            "backend": backend.name, "seed": args.seed,
        })
        records.append({"image_id": image_id, "candidates": candidates})
    _write_jsonl(args.out, records)
    print(f"refined {len(records)} images -> {args.out}")
    return EXIT_OK


def _candidate_texts(obj: dict, where: str) -> list[str]:
    raw = _require(obj, "candidates", where)
    texts = []
    for item in raw:
        if isinstance(item, str):
            texts.append(item)
        elif isinstance(item, dict) and "text" in item:
            texts.append(str(item["text"]))
        else:
            raise InputFormatError(
                f"{where}: candidates must be strings or objects with 'text'"
            )
    return texts


def _cmd_filter(args) -> int:
    candidate_records = _read_jsonl(args.candidates)
    predictions = _predictions_by_image(args.predictions)
    idf = build_idf(list(predictions.values()))
    clipped = args.variant == "cider-d"
    records = []
    for lineno, obj in enumerate(candidate_records, start=1):
        where = f"{args.candidates}:{lineno}"
        image_id = str(_require(obj, "image_id", where))
        if image_id not in predictions:
            raise InputFormatError(
                f"{where}: image {image_id!r} missing from predictions file"
            )
        result = select_best(
            image_id,
            _candidate_texts(obj, where),
            predictions[image_id],
            idf,
            clipped=clipped,
            length_penalty=clipped,
        )
        records.append({
            "image_id": image_id,
            "scores": list(result.scores),
            "selected_index": result.selected_index,
            "selected_sentence": result.selected_sentence,
        })
    _write_jsonl(args.out, records)
    print(f"filtered {len(records)} images -> {args.out}")
    return EXIT_OK


def _cmd_guidance(args) -> int:
    image_store = l2_normalize(load_store(args.images))
    text_store = l2_normalize(load_store(args.texts))
    pairs = []
    for lineno, obj in enumerate(_read_jsonl(args.pairs), start=1):
        where = f"{args.pairs}:{lineno}"
        pairs.append((
            str(_require(obj, "image_id", where)),
            str(_require(obj, "text_id", where)),
        ))
    if not pairs:
        raise InputFormatError(f"{args.pairs}: no pairs")
    for image_id, text_id in pairs:
        if image_id not in image_store:
            raise InputFormatError(f"unknown image id {image_id!r}")
        if text_id not in text_store:
            raise InputFormatError(f"unknown text id {text_id!r}")
    images = np.stack([image_store.row(i) for i, _ in pairs])
    texts = np.stack([text_store.row(t) for _, t in pairs])
    batch = GuidanceBatch(image_embeddings=images, text_embeddings=texts, tau=args.tau)
    loss, (grad_images, grad_texts) = infonce_loss(batch)

    ids = [f"q:{i}" for i, _ in pairs] + [f"k:{t}" for _, t in pairs]
    grads = np.vstack([grad_images, grad_texts]).astype(np.float32)
    save_store(EmbeddingStore(ids=tuple(ids), vectors=grads, normalized=False),
               args.out)
    summary = {"loss": loss, "B": batch.size, "d": batch.dim, "tau": args.tau}
    Path(args.out + ".json").write_text(json.dumps(summary) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    return EXIT_OK


def _cmd_score(args) -> int:
    cand_records = _read_jsonl(args.candidates)
    ref_records = _read_jsonl(args.references)
    refs_by_image: dict[str, list[str]] = {}
    for lineno, obj in enumerate(ref_records, start=1):
        where = f"{args.references}:{lineno}"
        image_id = str(_require(obj, "image_id", where))
        if "references" in obj:
            refs = [str(r) for r in obj["references"]]
        elif "reference" in obj:
            refs = [str(obj["reference"])]
        else:
            raise InputFormatError(f"{where}: need 'references' or 'reference'")
        refs_by_image[image_id] = refs

    candidates, references = [], []
    for lineno, obj in enumerate(cand_records, start=1):
        where = f"{args.candidates}:{lineno}"
        image_id = str(_require(obj, "image_id", where))
        sentence = obj.get("sentence") or obj.get("selected_sentence") or obj.get("text")
        if sentence is None and isinstance(obj.get("filter"), dict):
            sentence = obj["filter"].get("selected_sentence")
        if sentence is None:
            raise InputFormatError(
                f"{where}: need 'sentence', 'selected_sentence', or 'text'"
            )
        if image_id not in refs_by_image:
            raise InputFormatError(f"{where}: no references for image {image_id!r}")
        candidates.append(str(sentence))
        references.append(refs_by_image[image_id])

    score = score_corpus(candidates, references)
    payload = {
        "bleu": list(score.bleu),
        "rouge_l": score.rouge_l,
        "sentence_count": score.sentence_count,
    }
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(payload))
    return EXIT_OK


def _config_from_args(args) -> PipelineConfig:
    file_values = config_from_file(args.config) if args.config else {}
    overrides = {
        "images": args.images,
        "descriptions": args.descriptions,
        "catalog": args.catalog,
        "out_dir": args.out_dir,
        "predictions": args.predictions,
        "exclude_images": args.exclude_images,
        "sentence_embedder": args.sentence_embedder,
        "hash_dim": args.hash_dim,
        "k": args.k,
        "m": args.m,
        "tau": args.tau,
        "max_tokens": args.max_tokens,
        "seed": args.seed,
        "backend": args.backend,
        "concurrency": args.concurrency,
        "fail_fast": True if args.fail_fast else None,
        "cider_variant": args.cider_variant,
    }
    return build_config(file_values, overrides)


def _report_manifest(manifest) -> int:
    errors = manifest.error_images
    ok = len(manifest.images) - len(errors)
    out_dir = manifest.config["out_dir"]
    print(f"{ok} images ok, {len(errors)} failed -> "
          f"{Path(out_dir) / DATASET_FILENAME} ({Path(out_dir) / MANIFEST_FILENAME})")
    for image_id in errors[:10]:
        rec = manifest.images[image_id]
        print(f"  error {image_id}: [{rec['stage']}] {rec['message']}")
    return EXIT_PARTIAL if errors else EXIT_OK


def _cmd_run(args) -> int:
    config = _config_from_args(args)
    return _report_manifest(run_pipeline(config))


def _cmd_resume(args) -> int:
    config = _config_from_args(args)
    manifest_path = args.manifest or str(Path(config.out_dir) / MANIFEST_FILENAME)
    return _report_manifest(resume(manifest_path, config))


# --------------------------------------------------------------------------
# parser wiring


def _add_backend_args(sub, include_max_tokens: bool = True):
    sub.add_argument("--backend", default=None,
                     help="'fallback' or service base URL (default: "
                          f"${ENV_BACKEND_URL} or fallback)")
    sub.add_argument("--seed", type=int, default=0)
    if include_max_tokens:
        sub.add_argument("--max-tokens", type=int, default=DEFAULT_MAX_TOKENS,
                         dest="max_tokens")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rapsg", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("retrieve", help="rank descriptions per image, keep top-k")
    p.add_argument("--images", required=True)
    p.add_argument("--descriptions", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--exclude-images", default=None, dest="exclude_images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("group", help="split each image's top-k into head + tail groups")
    p.add_argument("--topk", required=True)
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--c1-embeddings", default=None, dest="c1_embeddings",
                   help="sentence-embedding store keyed by image id (lead sentence) "
                        "and description id; omit to use the hash channel")
    p.add_argument("--catalog", default=None)
    p.add_argument("--hash-dim", type=int, default=64, dest="hash_dim")
    _add_backend_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_group)

    p = sub.add_parser("summarize", help="summarize every group into a candidate")
    p.add_argument("--groups", required=True)
    p.add_argument("--catalog", required=True)
    _add_backend_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_summarize)

    p = sub.add_parser("refine", help="append the prediction-refined candidate")
    p.add_argument("--candidates", required=True)
    p.add_argument("--topk", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--predictions", required=True)
    _add_backend_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("filter", help="score candidates against predictions, argmax")
    p.add_argument("--candidates", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--variant", choices=("cider-d", "cider"), default="cider-d")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("guidance", help="contrastive loss and gradients for a batch")
    p.add_argument("--images", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--tau", type=float, default=0.07)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_guidance)

    p = sub.add_parser("score", help="BLEU/ROUGE-L report against references")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_score)

    for name, handler in (("run", _cmd_run), ("resume", _cmd_resume)):
        p = sub.add_parser(name, help=f"{name} the full pipeline")
        p.add_argument("--config", default=None, help="key=value config file")
        if name == "resume":
            p.add_argument("--manifest", default=None,
                           help="prior manifest (default: <out_dir>/manifest.json)")
        p.add_argument("--images", default=None)
        p.add_argument("--descriptions", default=None)
        p.add_argument("--catalog", default=None)
        p.add_argument("--out-dir", default=None, dest="out_dir")
        p.add_argument("--predictions", default=None)
        p.add_argument("--exclude-images", default=None, dest="exclude_images")
        p.add_argument("--sentence-embedder", default=None, dest="sentence_embedder")
        p.add_argument("--hash-dim", type=int, default=None, dest="hash_dim")
        p.add_argument("--k", type=int, default=None)
        p.add_argument("--m", type=int, default=None)
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--max-tokens", type=int, default=None, dest="max_tokens")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--backend", default=None)
        p.add_argument("--concurrency", type=int, default=None)
        p.add_argument("--fail-fast", action="store_true", dest="fail_fast")
        p.add_argument("--cider-variant", choices=("cider-d", "cider"), default=None,
                       dest="cider_variant")
        p.set_defaults(func=handler)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except BackendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except RapsgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
