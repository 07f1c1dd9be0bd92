"""ID-addressed embedding matrices and their bit-exact binary container.

This module is the sole gateway for vector data entering the pipeline.
Stores are immutable after construction and safe for concurrent reads;
writing is single-writer via an atomic rename.

On-disk layout (little-endian throughout)::

    magic   b"RAPS"                     4 bytes
    version u16                   = 1   2 bytes
    flags   u16  (bit 0: normalized)    2 bytes
    dim     u32                         4 bytes
    count   u64                         8 bytes
    ids     count x (len u16, UTF-8)
    payload count x dim float32, row-major
    crc32   u32 over all preceding bytes

The catalog side-file is JSON Lines with fields ``id``, ``text`` and an
optional ``source_image_id`` used by the duplicate-removal filter.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    ChecksumError,
    DimensionMismatchError,
    DuplicateIdError,
    InputFormatError,
    InvalidIdError,
    MalformedHeaderError,
    StoreFormatError,
    TruncatedPayloadError,
)

MAGIC = b"RAPS"
FORMAT_VERSION = 1
FLAG_NORMALIZED = 0x0001

_HEADER = struct.Struct("<HHIQ")  # version, flags, dim, count
_HEADER_SIZE = 4 + _HEADER.size  # magic + fixed fields = 20 bytes

NORM_TOLERANCE = 1e-5


@dataclass(frozen=True)
class EmbeddingStore:
    """Ordered, ID-addressed matrix of float32 vectors.

    ``ids`` and ``vectors`` rows correspond one-to-one; file order is the
    canonical order and downstream tie-breaks refer to it.
    """

    ids: tuple[str, ...]
    vectors: np.ndarray
    normalized: bool = False
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        vectors = np.asarray(self.vectors)
        if vectors.ndim != 2:
            raise ValueError(f"vectors must be a 2-D matrix, got shape {vectors.shape}")
        if vectors.dtype != np.float32:
            vectors = vectors.astype(np.float32)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "ids", tuple(self.ids))
        if len(self.ids) != vectors.shape[0]:
            raise DimensionMismatchError(
                f"{len(self.ids)} ids but {vectors.shape[0]} vector rows", 0
            )
        if not all(self.ids):
            raise InvalidIdError("empty id", 0)
        index = {}
        for row, id_ in enumerate(self.ids):
            if id_ in index:
                raise DuplicateIdError(id_, 0)
            index[id_] = row
        object.__setattr__(self, "_index", index)
        if not np.isfinite(vectors).all():
            raise ValueError("vectors contain non-finite values")
        if self.normalized:
            norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
            bad = np.abs(norms - 1.0) > NORM_TOLERANCE
            if bad.any():
                raise ValueError(
                    f"store flagged normalized but row {self.ids[int(np.argmax(bad))]!r} "
                    f"has norm {norms[bad][0]:.8f}"
                )

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, id_: str) -> bool:
        return id_ in self._index

    def row_index(self, id_: str) -> int:
        try:
            return self._index[id_]
        except KeyError:
            raise KeyError(f"unknown id {id_!r}") from None

    def row(self, id_: str) -> np.ndarray:
        return self.vectors[self.row_index(id_)]

    def subset(self, keep: Iterable[str]) -> "EmbeddingStore":
        """Restrict to ``keep``, preserving original file order."""
        keep = set(keep)
        missing = keep - set(self.ids)
        if missing:
            raise KeyError(f"unknown ids: {sorted(missing)[:5]}")
        rows = [i for i, id_ in enumerate(self.ids) if id_ in keep]
        return EmbeddingStore(
            ids=tuple(self.ids[i] for i in rows),
            vectors=self.vectors[rows].copy(),
            normalized=self.normalized,
        )


def l2_normalize(store: EmbeddingStore) -> EmbeddingStore:
    """Scale every row to unit Euclidean norm.

    A no-op when the store is already flagged normalized, which makes the
    operation exactly idempotent. Zero-norm rows are a hard error because
    they indicate a broken upstream export.
    """
    if store.normalized:
        return store
    norms = np.linalg.norm(store.vectors.astype(np.float64), axis=1)
    zero = norms == 0.0
    if zero.any():
        raise ValueError(f"zero-norm row for id {store.ids[int(np.argmax(zero))]!r}")
    vectors = (store.vectors.astype(np.float64) / norms[:, None]).astype(np.float32)
    return EmbeddingStore(ids=store.ids, vectors=vectors, normalized=True)


def save_store(store: EmbeddingStore, path: str | Path) -> None:
    """Serialize to the binary container, atomically."""
    path = Path(path)
    buf = bytearray()
    buf += MAGIC
    flags = FLAG_NORMALIZED if store.normalized else 0
    buf += _HEADER.pack(FORMAT_VERSION, flags, store.dim, len(store))
    for id_ in store.ids:
        raw = id_.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"id longer than 65535 bytes: {id_[:32]!r}...")
        buf += struct.pack("<H", len(raw))
        buf += raw
    buf += np.ascontiguousarray(store.vectors, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    os.replace(tmp, path)


def load_store(path: str | Path) -> EmbeddingStore:
    """Parse the binary container, validating structure and checksum.

    Raises a distinct :class:`~rapsg.errors.StoreFormatError` subclass for
    each failure mode; every error names the byte offset where parsing
    stopped.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER_SIZE:
        raise MalformedHeaderError(
            f"file is {len(data)} bytes, shorter than the fixed header", len(data)
        )
    if data[:4] != MAGIC:
        raise MalformedHeaderError(f"bad magic {data[:4]!r}", 0)
    version, flags, dim, count = _HEADER.unpack_from(data, 4)
    if version != FORMAT_VERSION:
        raise MalformedHeaderError(f"unsupported format version {version}", 4)
    if flags & ~FLAG_NORMALIZED:
        raise MalformedHeaderError(f"unknown flag bits 0x{flags:04x}", 6)
    if dim == 0:
        raise DimensionMismatchError("dimension is zero", 8)

    ids: list[str] = []
    seen: set[str] = set()
    off = _HEADER_SIZE
    for _ in range(count):
        if off + 2 > len(data):
            raise TruncatedPayloadError(
                f"id table ends after {len(ids)} of {count} entries", off
            )
        (length,) = struct.unpack_from("<H", data, off)
        off += 2
        if off + length > len(data):
            raise TruncatedPayloadError("id bytes run past end of file", off)
        raw = data[off : off + length]
        try:
            id_ = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise InvalidIdError("id is not valid UTF-8", off) from None
        if not id_:
            raise InvalidIdError("empty id", off)
        if id_ in seen:
            raise DuplicateIdError(id_, off)
        seen.add(id_)
        ids.append(id_)
        off += length

    payload_size = count * dim * 4
    if off + payload_size > len(data):
        raise TruncatedPayloadError(
            f"payload needs {payload_size} bytes, {len(data) - off} available", off
        )
    vectors = np.frombuffer(
        data, dtype="<f4", count=count * dim, offset=off
    ).reshape(count, dim)
    off += payload_size

    if off + 4 > len(data):
        raise TruncatedPayloadError("missing trailing CRC32", off)
    (stored_crc,) = struct.unpack_from("<I", data, off)
    actual_crc = zlib.crc32(data[:off])
    if stored_crc != actual_crc:
        raise ChecksumError(
            f"CRC32 mismatch: stored 0x{stored_crc:08x}, computed 0x{actual_crc:08x}", off
        )
    if off + 4 != len(data):
        raise StoreFormatError(f"{len(data) - off - 4} trailing bytes after CRC", off + 4)

    return EmbeddingStore(
        ids=tuple(ids),
        vectors=vectors.copy(),
        normalized=bool(flags & FLAG_NORMALIZED),
    )


@dataclass(frozen=True)
class CatalogEntry:
    text: str
    source_image_id: str | None = None


@dataclass(frozen=True)
class DescriptionCatalog:
    """Raw description texts keyed by id, in file order."""

    entries: Mapping[str, CatalogEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, id_: str) -> bool:
        return id_ in self.entries

    def text(self, id_: str) -> str:
        return self.entries[id_].text

    def validate_against(self, store: EmbeddingStore) -> None:
        """Every catalog id must have a row in the companion store."""
        missing = [id_ for id_ in self.entries if id_ not in store]
        if missing:
            raise InputFormatError(
                f"{len(missing)} catalog ids missing from embedding store, "
                f"first: {missing[0]!r}"
            )


def load_catalog(path: str | Path) -> DescriptionCatalog:
    entries: dict[str, CatalogEntry] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
                raise InputFormatError(f"{path}:{lineno}: expected fields 'id' and 'text'")
            id_ = str(obj["id"])
            if id_ in entries:
                raise InputFormatError(f"{path}:{lineno}: duplicate catalog id {id_!r}")
            source = obj.get("source_image_id")
            entries[id_] = CatalogEntry(
                text=str(obj["text"]),
                source_image_id=None if source is None else str(source),
            )
    return DescriptionCatalog(entries=entries)


def save_catalog(catalog: DescriptionCatalog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for id_, entry in catalog.entries.items():
            obj: dict = {"id": id_, "text": entry.text}
            if entry.source_image_id is not None:
                obj["source_image_id"] = entry.source_image_id
            fh.write(json.dumps(obj, ensure_ascii=True) + "\n")


def overlap_filter(
    catalog: DescriptionCatalog, excluded_image_ids: Iterable[str]
) -> DescriptionCatalog:
    """Drop entries whose source image is in the excluded set.

    Entries without a source image id are always kept; an empty result is
    legal.
    """
    excluded = set(excluded_image_ids)
    kept = {
        id_: entry
        for id_, entry in catalog.entries.items()
        if entry.source_image_id is None or entry.source_image_id not in excluded
    }
    return DescriptionCatalog(entries=kept)


def load_id_list(path: str | Path) -> list[str]:
    """One id per line; blank lines and '#' comments ignored."""
    ids = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                ids.append(line)
    return ids
