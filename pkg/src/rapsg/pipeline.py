"""End-to-end orchestration: retrieve, group, summarize, refine, filter.

A run is a deterministic function of its config and inputs when the
fallback backend is used: records are emitted in input image order
regardless of worker scheduling, floats are serialized as shortest
round-trip decimals, and the manifest pins content digests of every
input and output so a run can be resumed or audited.

Stage-II refinement consumes an externally supplied predictions file
(one captioner prediction per image). Without it the run stops after
Stage-I: candidates only, no refinement, no fluency filter; supply the
predictions and rerun (or resume) for the second round.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .errors import (
    BackendError,
    ConfigError,
    InputFormatError,
    RapsgError,
    ResumeError,
)
from .fluency import IdfTable, build_idf, select_best
from .grouping import (
    GroupingPlan,
    HashSentenceEmbedder,
    collapse_duplicate_texts,
    partition_remainder,
    select_head,
    validate_group_sizes,
)
from .retrieval import TopK, rank_all
from .store import (
    DescriptionCatalog,
    EmbeddingStore,
    l2_normalize,
    load_catalog,
    load_id_list,
    load_store,
    overlap_filter,
)
from .summarize import (
    KIND_REFINE,
    KIND_SUMMARIZE,
    HttpBackend,
    Provenance,
    PseudoSentenceSet,
    SummarizationRequest,
    SummarizerBackend,
    make_backend,
)

log = logging.getLogger(__name__)

DATASET_FILENAME = "dataset.jsonl"
MANIFEST_FILENAME = "manifest.json"
ENV_BACKEND_URL = "RAPSG_BACKEND_URL"

_CONFIG_BOOLS = {"fail_fast"}
_CONFIG_INTS = {"k", "m", "max_tokens", "seed", "concurrency", "hash_dim"}
_CONFIG_FLOATS = {"tau"}


@dataclass(frozen=True)
class PipelineConfig:
    images: str
    descriptions: str
    catalog: str
    out_dir: str
    predictions: str | None = None
    exclude_images: str | None = None
    sentence_embedder: str = "hash"
    hash_dim: int = 64
    k: int = 16
    m: int = 4
    tau: float = 0.07
    max_tokens: int = 20
    seed: int = 0
    backend: str = "fallback"
    concurrency: int = 4
    fail_fast: bool = False
    cider_variant: str = "cider-d"

    def validate(self) -> None:
        try:
            validate_group_sizes(self.k, self.m)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.tau <= 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.max_tokens < 1:
            raise ConfigError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in u64, got {self.seed}")
        if self.concurrency < 1:
            raise ConfigError(f"concurrency must be >= 1, got {self.concurrency}")
        if self.hash_dim < 1:
            raise ConfigError(f"hash_dim must be >= 1, got {self.hash_dim}")
        if self.cider_variant not in ("cider-d", "cider"):
            raise ConfigError(f"cider_variant must be cider-d or cider, got "
                              f"{self.cider_variant!r}")
        if self.backend != "fallback" and not self.backend.startswith(
            ("http://", "https://")
        ):
            raise ConfigError(
                f"backend must be 'fallback' or an http(s) URL, got {self.backend!r}"
            )

    def snapshot(self) -> dict:
        return asdict(self)


def config_from_file(path: str | Path) -> dict:
    """Parse a flat key=value config file; '#' starts a comment."""
    values: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in PipelineConfig.__dataclass_fields__:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce_config_value(key, value, f"{path}:{lineno}")
    return values


def _coerce_config_value(key: str, value: str, where: str):
    try:
        if key in _CONFIG_BOOLS:
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if key in _CONFIG_INTS:
            return int(value)
        if key in _CONFIG_FLOATS:
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return value


def build_config(file_values: dict, overrides: dict) -> PipelineConfig:
    """File values first, then CLI overrides, then env for the backend."""
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    env_backend = os.environ.get(ENV_BACKEND_URL)
    if env_backend and overrides.get("backend") is None:
        merged["backend"] = env_backend
    missing = [
        name for name in ("images", "descriptions", "catalog", "out_dir")
        if not merged.get(name)
    ]
    if missing:
        raise ConfigError(f"missing required config keys: {', '.join(missing)}")
    config = PipelineConfig(**merged)
    config.validate()
    return config


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


@dataclass
class RunManifest:
    config: dict
    stages: dict = field(default_factory=dict)
    images: dict = field(default_factory=dict)
    digests: dict = field(default_factory=dict)
    tool_version: str = __version__
    created_utc: str = field(default_factory=_utc_now)
    resumed: dict | None = None

    def to_json(self) -> dict:
        payload = {
            "tool_version": self.tool_version,
            "created_utc": self.created_utc,
            "config": self.config,
            "stages": self.stages,
            "images": self.images,
            "digests": self.digests,
        }
        if self.resumed is not None:
            payload["resumed"] = self.resumed
        return payload

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json(), indent=2, sort_keys=False) + "\n",
            encoding="utf-8",
        )

    @property
    def error_images(self) -> list[str]:
        return [id_ for id_, rec in self.images.items() if rec["status"] != "ok"]


@dataclass
class _LoadedInputs:
    image_store: EmbeddingStore
    corpus: EmbeddingStore
    catalog: DescriptionCatalog
    predictions: dict[str, str] | None
    prediction_corpus: list[str]
    idf: IdfTable | None
    input_digests: dict


def _load_predictions(path: str | Path) -> tuple[dict[str, str], list[str]]:
    by_image: dict[str, str] = {}
    corpus: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            if "image_id" not in obj or "prediction" not in obj:
                raise InputFormatError(
                    f"{path}:{lineno}: expected fields 'image_id' and 'prediction'"
                )
            image_id = str(obj["image_id"])
            if image_id in by_image:
                raise InputFormatError(f"{path}:{lineno}: duplicate image_id {image_id!r}")
            by_image[image_id] = str(obj["prediction"])
            corpus.append(str(obj["prediction"]))
    if not by_image:
        raise InputFormatError(f"{path}: predictions file is empty")
    return by_image, corpus


def load_inputs(config: PipelineConfig) -> _LoadedInputs:
    for name in ("images", "descriptions", "catalog", "predictions", "exclude_images"):
        path = getattr(config, name)
        if path is not None and not Path(path).exists():
            raise ConfigError(f"{name} file not found: {path}")
    if config.sentence_embedder != "hash" and not Path(config.sentence_embedder).exists():
        raise ConfigError(
            f"sentence_embedder must be 'hash' or a store path, got "
            f"{config.sentence_embedder!r}"
        )

    digests = {"images": sha256_file(config.images),
               "descriptions": sha256_file(config.descriptions),
               "catalog": sha256_file(config.catalog)}
    image_store = l2_normalize(load_store(config.images))
    desc_store = l2_normalize(load_store(config.descriptions))
    catalog = load_catalog(config.catalog)
    catalog.validate_against(desc_store)
    if config.exclude_images:
        digests["exclude_images"] = sha256_file(config.exclude_images)
        catalog = overlap_filter(catalog, load_id_list(config.exclude_images))
    corpus = desc_store.subset(catalog.entries.keys())
    if len(corpus) < config.k:
        raise ConfigError(
            f"k={config.k} but only {len(corpus)} descriptions remain after filtering"
        )

    predictions = None
    prediction_corpus: list[str] = []
    idf = None
    if config.predictions:
        digests["predictions"] = sha256_file(config.predictions)
        predictions, prediction_corpus = _load_predictions(config.predictions)
        idf = build_idf(prediction_corpus)
    return _LoadedInputs(
        image_store=image_store,
        corpus=corpus,
        catalog=catalog,
        predictions=predictions,
        prediction_corpus=prediction_corpus,
        idf=idf,
        input_digests=digests,
    )


def _make_embedding_channel(
    config: PipelineConfig, catalog: DescriptionCatalog
) -> tuple[Callable[[str, str], np.ndarray], Callable[[str], np.ndarray]]:
    """(c1_vector(image_id, c1_text), desc_vector(desc_id)) lookups.

    'hash' embeds sentence texts on the fly; a store path means
    precomputed sentence embeddings keyed by description id, with the
    lead-sentence row keyed by image id.
    """
    if config.sentence_embedder == "hash":
        embedder = HashSentenceEmbedder(dim=config.hash_dim)

        def c1_vector(image_id: str, c1_text: str) -> np.ndarray:
            return embedder.embed(c1_text)

        def desc_vector(desc_id: str) -> np.ndarray:
            return embedder.embed(catalog.text(desc_id))

        return c1_vector, desc_vector

    sentence_store = l2_normalize(load_store(config.sentence_embedder))

    def c1_vector(image_id: str, c1_text: str) -> np.ndarray:
        if image_id not in sentence_store:
            raise InputFormatError(
                f"sentence store has no lead-sentence row for image {image_id!r}"
            )
        return sentence_store.row(image_id)

    def desc_vector(desc_id: str) -> np.ndarray:
        if desc_id not in sentence_store:
            raise KeyError(f"no embedding for description {desc_id!r}")
        return sentence_store.row(desc_id)

    return c1_vector, desc_vector


@dataclass
class ImageRecord:
    image_id: str
    topk: TopK
    plan: GroupingPlan
    candidates: PseudoSentenceSet
    filter_scores: tuple[float, ...] | None = None
    selected_index: int | None = None
    selected_sentence: str | None = None

    def to_json(self) -> dict:
        record = {
            "image_id": self.image_id,
            "topk": [
                {"desc_id": id_, "score": score} for id_, score in self.topk.entries
            ],
            "grouping": {
                "k": self.plan.k,
                "m": self.plan.m,
                "head": list(self.plan.head),
                "tail_groups": [list(g) for g in self.plan.tail_groups],
            },
            "candidates": [
                {
                    "text": text,
                    "kind": prov.kind,
                    "groups": list(prov.groups),
                    "backend": prov.backend,
                    "seed": prov.seed,
                }
                for text, prov in zip(
                    self.candidates.sentences, self.candidates.provenance
                )
            ],
            "filter": None,
        }
        if self.filter_scores is not None:
            record["filter"] = {
                "scores": list(self.filter_scores),
                "selected_index": self.selected_index,
                "selected_sentence": self.selected_sentence,
            }
        return record


def record_to_line(record: dict) -> str:
    return json.dumps(record, ensure_ascii=True, separators=(",", ":")) + "\n"


@dataclass
class _ImageFailure:
    image_id: str
    stage: str
    message: str


class StageError(RapsgError):
    """Wraps a per-image failure with the stage it occurred in."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(str(cause))
        self.stage = stage
        self.cause = cause


def generate_candidates(
    topk: TopK,
    catalog: DescriptionCatalog,
    backend: SummarizerBackend,
    c1_vector: Callable[[str, str], np.ndarray],
    desc_vector: Callable[[str], np.ndarray],
    m: int,
    seed: int,
    max_tokens: int,
    prediction: str | None,
) -> tuple[GroupingPlan, PseudoSentenceSet]:
    """Stage-I grouping and summarization plus optional Stage-II refinement.

    Failures are re-raised as :class:`StageError` naming the stage
    (group, summarize, or refine) so per-image accounting stays precise.
    """
    stage = "group"
    try:
        head = select_head(topk, m)
        head_texts = [
            catalog.text(id_) for id_ in collapse_duplicate_texts(head, catalog.text)
        ]
        stage = "summarize"
        c1 = backend.run(
            SummarizationRequest(
                kind=KIND_SUMMARIZE, descriptions=head_texts, seed=seed,
                max_tokens=max_tokens,
            )
        )
        stage = "group"
        plan = partition_remainder(
            topk, head, c1_vector(topk.image_id, c1), desc_vector
        )

        sentences = [c1]
        provenance = [
            Provenance(kind=KIND_SUMMARIZE, groups=(0,), backend=backend.name,
                       seed=seed)
        ]
        stage = "summarize"
        for idx, group in enumerate(plan.tail_groups, start=1):
            texts = [
                catalog.text(id_)
                for id_ in collapse_duplicate_texts(group, catalog.text)
            ]
            sentences.append(
                backend.run(
                    SummarizationRequest(
                        kind=KIND_SUMMARIZE, descriptions=texts, seed=seed,
                        max_tokens=max_tokens,
                    )
                )
            )
            provenance.append(
                Provenance(kind=KIND_SUMMARIZE, groups=(idx,), backend=backend.name,
                           seed=seed)
            )

        if prediction is not None:
            stage = "refine"
            refined = backend.run(
                SummarizationRequest(
                    kind=KIND_REFINE,
                    descriptions=[catalog.text(id_) for id_ in topk.ids],
                    seed=seed,
                    max_tokens=max_tokens,
                    prediction=prediction,
                )
            )
            sentences.append(refined)
            provenance.append(
                Provenance(kind=KIND_REFINE, groups=(), backend=backend.name,
                           seed=seed)
            )
    except (RapsgError, KeyError, ValueError) as exc:
        raise StageError(stage, exc) from exc

    candidate_set = PseudoSentenceSet(
        image_id=topk.image_id,
        sentences=tuple(sentences),
        provenance=tuple(provenance),
    )
    return plan, candidate_set


def _process_image(
    topk: TopK,
    inputs: _LoadedInputs,
    config: PipelineConfig,
    backend: SummarizerBackend,
    c1_vector,
    desc_vector,
) -> ImageRecord | _ImageFailure:
    image_id = topk.image_id
    prediction = None
    if inputs.predictions is not None:
        prediction = inputs.predictions.get(image_id)
        if prediction is None:
            return _ImageFailure(image_id, "refine", "no prediction for this image")
    try:
        plan, candidates = generate_candidates(
            topk=topk,
            catalog=inputs.catalog,
            backend=backend,
            c1_vector=c1_vector,
            desc_vector=desc_vector,
            m=config.m,
            seed=config.seed,
            max_tokens=config.max_tokens,
            prediction=prediction,
        )
    except StageError as exc:
        return _ImageFailure(image_id, exc.stage, str(exc))

    record = ImageRecord(
        image_id=image_id, topk=topk, plan=plan, candidates=candidates
    )
    if prediction is not None:
        try:
            result = select_best(
                image_id,
                list(candidates.sentences),
                prediction,
                inputs.idf,
                clipped=config.cider_variant == "cider-d",
                length_penalty=config.cider_variant == "cider-d",
            )
        except ValueError as exc:
            return _ImageFailure(image_id, "filter", str(exc))
        record.filter_scores = result.scores
        record.selected_index = result.selected_index
        record.selected_sentence = result.selected_sentence
    return record


def _run_images(
    topks: list[TopK],
    inputs: _LoadedInputs,
    config: PipelineConfig,
    backend: SummarizerBackend,
) -> list[ImageRecord | _ImageFailure]:
    c1_vector, desc_vector = _make_embedding_channel(config, inputs.catalog)

    def worker(topk: TopK):
        res = _process_image(topk, inputs, config, backend, c1_vector, desc_vector)
        if config.fail_fast and isinstance(res, _ImageFailure):
            raise RapsgError(
                f"image {res.image_id!r} failed at {res.stage}: {res.message}"
            )
        return res

    if config.concurrency == 1 or len(topks) <= 1:
        return [worker(t) for t in topks]
    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        return list(pool.map(worker, topks))


def run_pipeline(
    config: PipelineConfig, backend: SummarizerBackend | None = None
) -> RunManifest:
    """Execute every stage and write dataset + manifest to the out dir."""
    config = _apply_env(config)
    config.validate()
    if backend is None:
        backend = _make_checked_backend(config.backend)
    manifest = RunManifest(config=config.snapshot())
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    inputs = load_inputs(config)
    manifest.stages["load"] = time.perf_counter() - t0
    manifest.digests["inputs"] = inputs.input_digests

    t0 = time.perf_counter()
    topks = rank_all(inputs.image_store, inputs.corpus, config.k)
    manifest.stages["retrieve"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    results = _run_images(topks, inputs, config, backend)
    manifest.stages["generate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    lines: list[str] = []
    for res in results:
        if isinstance(res, _ImageFailure):
            manifest.images[res.image_id] = {
                "status": "error", "stage": res.stage, "message": res.message,
            }
            log.warning("image %s failed at %s: %s", res.image_id, res.stage,
                        res.message)
        else:
            manifest.images[res.image_id] = {"status": "ok"}
            lines.append(record_to_line(res.to_json()))
    dataset_path = out_dir / DATASET_FILENAME
    dataset_path.write_text("".join(lines), encoding="utf-8")
    manifest.stages["write"] = time.perf_counter() - t0
    manifest.digests["outputs"] = {DATASET_FILENAME: sha256_file(dataset_path)}
    manifest.save(out_dir / MANIFEST_FILENAME)
    return manifest


def _apply_env(config: PipelineConfig) -> PipelineConfig:
    env_backend = os.environ.get(ENV_BACKEND_URL)
    if env_backend:
        return replace(config, backend=env_backend)
    return config


def _make_checked_backend(spec: str) -> SummarizerBackend:
    backend = make_backend(spec)
    if isinstance(backend, HttpBackend):
        try:
            backend.health()
        except Exception as exc:
            raise BackendError(f"backend health check failed: {exc}") from exc
    return backend


def resume(
    manifest_path: str | Path,
    config: PipelineConfig,
    backend: SummarizerBackend | None = None,
) -> RunManifest:
    """Complete only the images that failed or are missing.

    Refuses to run if the config snapshot or any input/output digest no
    longer matches the prior manifest; untouched dataset lines are reused
    verbatim, so they stay byte-identical.
    """
    config = _apply_env(config)
    config.validate()
    manifest_path = Path(manifest_path)
    try:
        prior = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ResumeError(f"cannot read manifest {manifest_path}: {exc}") from None

    if prior.get("config") != config.snapshot():
        raise ResumeError("config does not match the prior manifest; refusing to resume")

    out_dir = Path(config.out_dir)
    dataset_path = out_dir / DATASET_FILENAME
    if not dataset_path.exists():
        raise ResumeError(f"prior dataset not found: {dataset_path}")
    recorded = prior.get("digests", {}).get("outputs", {}).get(DATASET_FILENAME)
    if recorded != sha256_file(dataset_path):
        raise ResumeError("dataset digest does not match the prior manifest")

    inputs = load_inputs(config)
    if inputs.input_digests != prior.get("digests", {}).get("inputs"):
        raise ResumeError("input digests do not match the prior manifest")

    prior_lines: dict[str, str] = {}
    with open(dataset_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                prior_lines[json.loads(line)["image_id"]] = line

    image_ids = list(inputs.image_store.ids)
    prior_images = prior.get("images", {})
    todo = [
        id_ for id_ in image_ids
        if prior_images.get(id_, {}).get("status") != "ok" or id_ not in prior_lines
    ]

    manifest = RunManifest(
        config=config.snapshot(),
        stages=dict(prior.get("stages", {})),
        images=dict(prior_images),
        digests=dict(prior.get("digests", {})),
        created_utc=prior.get("created_utc", _utc_now()),
    )
    if not todo:
        manifest.resumed = {"at": _utc_now(), "recomputed": []}
        manifest.save(manifest_path)
        return manifest

    if backend is None:
        backend = _make_checked_backend(config.backend)
    topks = [
        t for t in rank_all(inputs.image_store, inputs.corpus, config.k)
        if t.image_id in set(todo)
    ]
    t0 = time.perf_counter()
    results = _run_images(topks, inputs, config, backend)
    elapsed = time.perf_counter() - t0

    new_lines: dict[str, str] = {}
    for res in results:
        if isinstance(res, _ImageFailure):
            manifest.images[res.image_id] = {
                "status": "error", "stage": res.stage, "message": res.message,
            }
        else:
            manifest.images[res.image_id] = {"status": "ok"}
            new_lines[res.image_id] = record_to_line(res.to_json())

    lines = []
    for id_ in image_ids:
        if id_ in new_lines:
            lines.append(new_lines[id_])
        elif id_ in prior_lines and manifest.images.get(id_, {}).get("status") == "ok":
            lines.append(prior_lines[id_])
    dataset_path.write_text("".join(lines), encoding="utf-8")
    manifest.digests["outputs"] = {DATASET_FILENAME: sha256_file(dataset_path)}
    manifest.resumed = {
        "at": _utc_now(), "recomputed": todo, "seconds": elapsed,
    }
    manifest.save(manifest_path)
    return manifest
