"""Binary container round-trips, validation errors, and the overlap filter."""

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np
import pytest

from rapsg.errors import (
    ChecksumError,
    DimensionMismatchError,
    DuplicateIdError,
    InputFormatError,
    InvalidIdError,
    MalformedHeaderError,
    StoreFormatError,
    TruncatedPayloadError,
)
from rapsg.store import (
    CatalogEntry,
    DescriptionCatalog,
    EmbeddingStore,
    l2_normalize,
    load_catalog,
    load_id_list,
    load_store,
    overlap_filter,
    save_catalog,
    save_store,
)


def _raw_store(ids, vectors, version=1, flags=0, dim=None, count=None,
               crc_delta=0, trailing=b""):
    """Craft container bytes directly, optionally with deliberate damage."""
    vectors = np.asarray(vectors, dtype="<f4")
    dim = vectors.shape[1] if dim is None else dim
    count = len(ids) if count is None else count
    buf = bytearray(b"RAPS")
    buf += struct.pack("<HHIQ", version, flags, dim, count)
    for id_ in ids:
        raw = id_.encode("utf-8") if isinstance(id_, str) else id_
        buf += struct.pack("<H", len(raw)) + raw
    buf += vectors.tobytes()
    buf += struct.pack("<I", (zlib.crc32(bytes(buf)) + crc_delta) & 0xFFFFFFFF)
    return bytes(buf) + trailing


def _write(tmp_path, data, name="store.bin"):
    path = tmp_path / name
    path.write_bytes(data)
    return path


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path):
        rng = np.random.default_rng(1)
        store = EmbeddingStore(
            ids=("a", "b", "c"), vectors=rng.normal(size=(3, 4)).astype(np.float32)
        )
        path = tmp_path / "s.bin"
        save_store(store, path)
        loaded = load_store(path)
        assert loaded.ids == store.ids
        assert np.array_equal(loaded.vectors, store.vectors)
        assert loaded.normalized == store.normalized
        # Re-saving the loaded store must reproduce the file byte for byte.
        second = tmp_path / "s2.bin"
        save_store(loaded, second)
        assert second.read_bytes() == path.read_bytes()

    def test_random_stores_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        for case in range(10):
            n = int(rng.integers(1, 40))
            dim = int(rng.integers(1, 33))
            ids = tuple(f"id-{case}-{i}" for i in range(n))
            store = EmbeddingStore(
                ids=ids, vectors=rng.normal(size=(n, dim)).astype(np.float32)
            )
            path = tmp_path / f"r{case}.bin"
            save_store(store, path)
            loaded = load_store(path)
            assert loaded.ids == ids
            assert np.array_equal(loaded.vectors, store.vectors)

    def test_unicode_ids(self, tmp_path):
        store = EmbeddingStore(
            ids=("héllo", "日本語"), vectors=np.ones((2, 3), dtype=np.float32)
        )
        path = tmp_path / "u.bin"
        save_store(store, path)
        assert load_store(path).ids == ("héllo", "日本語")

    def test_fixture_descriptions(self, desc_store_path, fixture_dir):
        store = load_store(desc_store_path)
        assert len(store) == 200
        assert store.dim == 16
        assert store.normalized
        checksums = json.loads((fixture_dir / "checksums.json").read_text())
        digest = hashlib.sha256(Path(desc_store_path).read_bytes()).hexdigest()
        assert digest == checksums["descriptions.store"]


class TestFormatErrors:
    def test_short_file(self, tmp_path):
        with pytest.raises(MalformedHeaderError):
            load_store(_write(tmp_path, b"RAPS\x01\x00"))

    def test_bad_magic(self, tmp_path):
        data = _raw_store(["a"], np.ones((1, 2)))
        with pytest.raises(MalformedHeaderError) as err:
            load_store(_write(tmp_path, b"XXXX" + data[4:]))
        assert err.value.offset == 0

    def test_bad_version(self, tmp_path):
        data = _raw_store(["a"], np.ones((1, 2)), version=9)
        with pytest.raises(MalformedHeaderError) as err:
            load_store(_write(tmp_path, data))
        assert err.value.offset == 4

    def test_unknown_flags(self, tmp_path):
        data = _raw_store(["a"], np.ones((1, 2)), flags=0x8000)
        with pytest.raises(MalformedHeaderError) as err:
            load_store(_write(tmp_path, data))
        assert err.value.offset == 6

    def test_zero_dim(self, tmp_path):
        data = _raw_store(["a"], np.ones((1, 2)), dim=0)
        with pytest.raises(DimensionMismatchError) as err:
            load_store(_write(tmp_path, data))
        assert err.value.offset == 8

    def test_duplicate_id(self, tmp_path):
        data = _raw_store(["d1", "d1"], np.ones((2, 2)))
        with pytest.raises(DuplicateIdError) as err:
            load_store(_write(tmp_path, data))
        assert "d1" in str(err.value)
        assert err.value.offset > 20

    def test_empty_id(self, tmp_path):
        data = _raw_store(["", "b"], np.ones((2, 2)))
        with pytest.raises(InvalidIdError):
            load_store(_write(tmp_path, data))

    def test_non_utf8_id(self, tmp_path):
        data = _raw_store([b"\xff\xfe", "b"], np.ones((2, 2)))
        with pytest.raises(InvalidIdError):
            load_store(_write(tmp_path, data))

    def test_truncated_id_table(self, tmp_path):
        data = _raw_store(["alpha", "beta"], np.ones((2, 2)))
        # Cut inside the first id entry: header (20) + length prefix + 2 chars.
        with pytest.raises(TruncatedPayloadError) as err:
            load_store(_write(tmp_path, data[:24]))
        assert err.value.offset >= 20

    def test_truncated_payload(self, tmp_path):
        good = _raw_store(["a", "b"], np.ones((2, 4)))
        with pytest.raises(TruncatedPayloadError) as err:
            load_store(_write(tmp_path, good[:-12]))
        assert err.value.offset > 0

    def test_crc_mismatch(self, tmp_path):
        data = _raw_store(["a"], np.ones((1, 2)), crc_delta=1)
        with pytest.raises(ChecksumError) as err:
            load_store(_write(tmp_path, data))
        assert "CRC32" in str(err.value)

    def test_trailing_bytes(self, tmp_path):
        data = _raw_store(["a"], np.ones((1, 2)), trailing=b"junk")
        with pytest.raises(StoreFormatError):
            load_store(_write(tmp_path, data))

    def test_flipped_payload_byte_fails_crc(self, tmp_path):
        data = bytearray(_raw_store(["a", "b"], np.ones((2, 3))))
        data[-6] ^= 0x01  # inside the payload, before the CRC
        with pytest.raises(ChecksumError):
            load_store(_write(tmp_path, bytes(data)))


class TestConstruction:
    def test_id_row_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            EmbeddingStore(ids=("a",), vectors=np.ones((2, 2), dtype=np.float32))

    def test_duplicate_ids(self):
        with pytest.raises(DuplicateIdError):
            EmbeddingStore(ids=("a", "a"), vectors=np.ones((2, 2), dtype=np.float32))

    def test_non_finite(self):
        bad = np.ones((2, 2), dtype=np.float32)
        bad[0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            EmbeddingStore(ids=("a", "b"), vectors=bad)

    def test_normalized_flag_checked(self):
        with pytest.raises(ValueError, match="norm"):
            EmbeddingStore(
                ids=("a",), vectors=np.array([[3.0, 4.0]], dtype=np.float32),
                normalized=True,
            )

    def test_subset_preserves_order(self):
        store = EmbeddingStore(
            ids=("a", "b", "c", "d"),
            vectors=np.arange(8, dtype=np.float32).reshape(4, 2),
        )
        sub = store.subset({"d", "b"})
        assert sub.ids == ("b", "d")
        assert np.array_equal(sub.vectors, store.vectors[[1, 3]])


class TestNormalize:
    def test_three_four_five(self):
        store = EmbeddingStore(
            ids=("p",), vectors=np.array([[3.0, 4.0]], dtype=np.float32)
        )
        normed = l2_normalize(store)
        assert np.allclose(normed.vectors[0], [0.6, 0.8], atol=1e-7)
        assert normed.normalized

    def test_direction_preserved(self):
        rng = np.random.default_rng(3)
        vectors = rng.normal(size=(50, 8)).astype(np.float32)
        store = l2_normalize(EmbeddingStore(
            ids=tuple(f"v{i}" for i in range(50)), vectors=vectors
        ))
        for i in range(50):
            old = vectors[i].astype(np.float64)
            new = store.vectors[i].astype(np.float64)
            cos = old @ new / (np.linalg.norm(old) * np.linalg.norm(new))
            assert abs(cos - 1.0) < 1e-6

    def test_idempotent(self):
        rng = np.random.default_rng(4)
        store = EmbeddingStore(
            ids=tuple(f"v{i}" for i in range(20)),
            vectors=rng.normal(size=(20, 16)).astype(np.float32),
        )
        once = l2_normalize(store)
        twice = l2_normalize(once)
        assert np.max(np.abs(twice.vectors - once.vectors)) <= 1e-7

    def test_norms_within_tolerance(self):
        rng = np.random.default_rng(5)
        store = l2_normalize(EmbeddingStore(
            ids=tuple(f"v{i}" for i in range(100)),
            vectors=rng.normal(size=(100, 16)).astype(np.float32),
        ))
        # Direct summation oracle, no linalg shortcuts.
        for row in store.vectors:
            norm = sum(float(x) * float(x) for x in row) ** 0.5
            assert 1 - 1e-5 <= norm <= 1 + 1e-5

    def test_zero_row_names_id(self):
        vectors = np.ones((3, 2), dtype=np.float32)
        vectors[1] = 0.0
        store = EmbeddingStore(ids=("a", "bad", "c"), vectors=vectors)
        with pytest.raises(ValueError, match="bad"):
            l2_normalize(store)


class TestCatalog:
    def test_round_trip(self, tmp_path):
        catalog = DescriptionCatalog(entries={
            "d1": CatalogEntry(text="a red bus", source_image_id="imgA"),
            "d2": CatalogEntry(text="dog in park"),
        })
        path = tmp_path / "cat.jsonl"
        save_catalog(catalog, path)
        loaded = load_catalog(path)
        assert loaded.entries == catalog.entries

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "cat.jsonl"
        path.write_text('{"id": "d1", "text": "x"}\n{"id": "d1", "text": "y"}\n')
        with pytest.raises(InputFormatError, match="duplicate"):
            load_catalog(path)

    def test_invalid_json_names_line(self, tmp_path):
        path = tmp_path / "cat.jsonl"
        path.write_text('{"id": "d1", "text": "x"}\nnot json\n')
        with pytest.raises(InputFormatError, match=":2"):
            load_catalog(path)

    def test_validate_against(self, tmp_path):
        catalog = DescriptionCatalog(entries={"d1": CatalogEntry(text="x")})
        store = EmbeddingStore(ids=("other",), vectors=np.ones((1, 2), dtype=np.float32))
        with pytest.raises(InputFormatError, match="d1"):
            catalog.validate_against(store)


class TestOverlapFilter:
    def test_basic_exclusion(self):
        catalog = DescriptionCatalog(entries={
            "d1": CatalogEntry(text="one", source_image_id="imgA"),
            "d2": CatalogEntry(text="two", source_image_id="imgB"),
        })
        kept = overlap_filter(catalog, {"imgA"})
        assert list(kept.entries) == ["d2"]

    def test_empty_exclusion_is_identity(self):
        catalog = DescriptionCatalog(entries={
            "d1": CatalogEntry(text="one", source_image_id="imgA"),
        })
        assert overlap_filter(catalog, set()).entries == catalog.entries

    def test_entries_without_source_kept(self):
        catalog = DescriptionCatalog(entries={
            "d1": CatalogEntry(text="one"),
            "d2": CatalogEntry(text="two", source_image_id="imgA"),
        })
        kept = overlap_filter(catalog, {"imgA"})
        assert list(kept.entries) == ["d1"]

    def test_result_is_subset(self):
        catalog = DescriptionCatalog(entries={
            f"d{i}": CatalogEntry(text=f"t{i}", source_image_id=f"s{i % 4}")
            for i in range(20)
        })
        kept = overlap_filter(catalog, {"s0", "s2"})
        assert set(kept.entries) <= set(catalog.entries)
        assert all(
            kept.entries[i].source_image_id not in {"s0", "s2"} for i in kept.entries
        )

    def test_fixture_retains_53_percent(self, catalog_path, exclude_path):
        catalog = load_catalog(catalog_path)
        excluded = set(load_id_list(exclude_path))
        kept = overlap_filter(catalog, excluded)
        # Recount with a direct loop over the raw file.
        expected = 0
        for line in Path(catalog_path).read_text().splitlines():
            obj = json.loads(line)
            if obj.get("source_image_id") not in excluded:
                expected += 1
        assert len(kept) == expected
        assert len(kept) == 106  # 53% of 200, with 47% marked overlapping
