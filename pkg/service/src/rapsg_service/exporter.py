"""Encode text or image lists into the binary embedding-store format.

Input is JSON Lines: {"id": ..., "text": ...} for --kind text, or
{"id": ..., "path": ...} for --kind image. Rows are unit-normalized and
the store is written atomically (temp file + rename), so a partial file
never appears at the target path. Per-item encoding failures are
recorded in a sidecar <out>.errors.jsonl and the item is skipped; zero
successes is a refusal.

Store layout (little-endian): magic "RAPS", version u16 = 1, flags u16
(bit 0 = normalized), dim u32, count u64, id table of (len u16, UTF-8),
count x dim float32 payload, trailing CRC32 of everything before it.

Encoders: `hash` (deterministic, dependency-free; for tests and CI),
`st:<model>` (sentence-transformers, text), `clip:<model>` (CLIP image
or text towers via transformers).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import struct
import sys
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"RAPS"
FORMAT_VERSION = 1
FLAG_NORMALIZED = 0x0001


def write_store(ids: list[str], vectors: np.ndarray, path: str | Path,
                normalized: bool = True) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise ValueError("vectors must be one row per id")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    buf = bytearray(MAGIC)
    flags = FLAG_NORMALIZED if normalized else 0
    buf += struct.pack("<HHIQ", FORMAT_VERSION, flags, vectors.shape[1], len(ids))
    for id_ in ids:
        raw = id_.encode("utf-8")
        if not raw or len(raw) > 0xFFFF:
            raise ValueError(f"id length out of range: {id_!r}")
        buf += struct.pack("<H", len(raw)) + raw
    buf += vectors.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    os.replace(tmp, path)


class HashEncoder:
    """Deterministic stand-in encoder: sha256-seeded token vectors, summed."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim

    def encode_text(self, text: str) -> np.ndarray:
        total = np.zeros(self.dim)
        words = [w for w in "".join(
            ch if ch.isalnum() else " " for ch in text.lower()
        ).split() if w]
        if not words:
            total[0] = 1.0
            return total
        for word in words:
            digest = hashlib.sha256(word.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "little")
            total += np.random.default_rng(seed).standard_normal(self.dim)
        norm = np.linalg.norm(total)
        if norm == 0.0:
            total[:] = 0.0
            total[0] = 1.0
            return total
        return total / norm

    def encode_image(self, path: str) -> np.ndarray:
        # Content-addressed stand-in: hash the file bytes.
        digest = hashlib.sha256(Path(path).read_bytes()).digest()
        seed = int.from_bytes(digest[:8], "little")
        vec = np.random.default_rng(seed).standard_normal(self.dim)
        return vec / np.linalg.norm(vec)


class SentenceTransformerEncoder:
    def __init__(self, model_name: str):
        from sentence_transformers import SentenceTransformer

        self._model = SentenceTransformer(model_name)
        self.dim = self._model.get_sentence_embedding_dimension()

    def encode_text(self, text: str) -> np.ndarray:
        vec = np.asarray(self._model.encode(text), dtype=np.float64)
        return vec / np.linalg.norm(vec)

    def encode_image(self, path: str) -> np.ndarray:
        raise ValueError("sentence-transformers encoder handles text only")


class ClipEncoder:
    def __init__(self, model_name: str):
        import torch
        from transformers import CLIPModel, CLIPProcessor

        self._torch = torch
        self._model = CLIPModel.from_pretrained(model_name)
        self._processor = CLIPProcessor.from_pretrained(model_name)
        self.dim = self._model.config.projection_dim

    def encode_text(self, text: str) -> np.ndarray:
        inputs = self._processor(text=[text], return_tensors="pt", truncation=True)
        with self._torch.no_grad():
            vec = self._model.get_text_features(**inputs)[0].numpy().astype(np.float64)
        return vec / np.linalg.norm(vec)

    def encode_image(self, path: str) -> np.ndarray:
        from PIL import Image

        image = Image.open(path).convert("RGB")
        inputs = self._processor(images=[image], return_tensors="pt")
        with self._torch.no_grad():
            vec = self._model.get_image_features(**inputs)[0].numpy().astype(np.float64)
        return vec / np.linalg.norm(vec)


def make_encoder(spec: str, dim: int):
    if spec == "hash":
        return HashEncoder(dim)
    if spec.startswith("st:"):
        return SentenceTransformerEncoder(spec[3:])
    if spec.startswith("clip:"):
        return ClipEncoder(spec[5:])
    raise ValueError(f"unknown encoder {spec!r}; use hash, st:<model>, or clip:<model>")


def read_items(path: str | Path, kind: str) -> list[tuple[str, str]]:
    field = "text" if kind == "text" else "path"
    items = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            if "id" not in obj or field not in obj:
                raise ValueError(f"{path}:{lineno}: expected fields 'id' and {field!r}")
            id_ = str(obj["id"])
            if id_ in seen:
                raise ValueError(f"{path}:{lineno}: duplicate id {id_!r}")
            seen.add(id_)
            items.append((id_, str(obj[field])))
    return items


def export(kind: str, input_path: str, out_path: str, encoder_spec: str = "hash",
           dim: int = 64) -> dict:
    """Encode every input item; returns {"exported": n, "failed": [...]}."""
    items = read_items(input_path, kind)
    if not items:
        raise ValueError(f"{input_path}: no items to export")
    encoder = make_encoder(encoder_spec, dim)
    encode = encoder.encode_text if kind == "text" else encoder.encode_image

    ids: list[str] = []
    rows: list[np.ndarray] = []
    failures: list[dict] = []
    for id_, payload in items:
        try:
            vec = encode(payload)
        except Exception as exc:
            failures.append({"id": id_, "error": str(exc)})
            continue
        ids.append(id_)
        rows.append(np.asarray(vec, dtype=np.float64))
    if not ids:
        raise ValueError("every item failed to encode; refusing to write a store")

    write_store(ids, np.vstack(rows).astype(np.float32), out_path, normalized=True)
    errors_path = Path(str(out_path) + ".errors.jsonl")
    if failures:
        errors_path.write_text(
            "".join(json.dumps(f) + "\n" for f in failures), encoding="utf-8"
        )
    elif errors_path.exists():
        errors_path.unlink()
    return {"exported": len(ids), "failed": failures}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rapsg-export", description=__doc__)
    parser.add_argument("--kind", choices=("image", "text"), required=True)
    parser.add_argument("--input", required=True, help="JSON Lines item list")
    parser.add_argument("--out", required=True, help="output store path")
    parser.add_argument("--encoder", default="hash",
                        help="hash | st:<model> | clip:<model>")
    parser.add_argument("--dim", type=int, default=64,
                        help="dimensionality (hash encoder only)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        report = export(args.kind, args.input, args.out, args.encoder, args.dim)
    except (ValueError, OSError) as exc:
        print(json.dumps({"error": {"code": "export_failure",
                                    "message": str(exc)}}), file=sys.stderr)
        return 1
    print(json.dumps({"exported": report["exported"],
                      "failed": len(report["failed"]), "out": args.out}))
    return 0 if not report["failed"] else 5


if __name__ == "__main__":
    sys.exit(main())
