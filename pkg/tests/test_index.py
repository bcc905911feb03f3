import json
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patret.index import (
    IndexBuildError,
    PirvFormatError,
    QueryError,
    build_index,
    dump_index,
    load_embeddings,
    load_index,
    query_batch,
    query_topk,
    read_pirv,
    save_embeddings,
    write_pirv,
)

BASE = date(2018, 1, 1)


def make_metadata(n, rng, classes=("A", "B", "C"), span_days=1000):
    out = []
    for i in range(n):
        out.append(
            (
                f"r{i:05d}",
                BASE + timedelta(days=int(rng.integers(0, span_days))),
                classes[int(rng.integers(0, len(classes)))],
                f"p{int(rng.integers(0, max(2, n // 2))):05d}",
            )
        )
    return out


def naive_scan(index, query, cutoff, k, exclude_patent=None, exclude_record=None):
    """Independent oracle: per-row float dot products and a full sort."""
    q = np.asarray(query, dtype=np.float64)
    q = q / np.linalg.norm(q)
    rows = []
    for i in range(len(index)):
        if not index.grant_dates[i] < cutoff:
            continue
        if exclude_patent is not None and str(index.patent_ids[i]) == exclude_patent:
            continue
        if exclude_record is not None and str(index.record_ids[i]) == exclude_record:
            continue
        score = float(np.dot(index.vectors64[i], q))
        rows.append((str(index.record_ids[i]), score))
    rows.sort(key=lambda t: (-t[1], t[0]))
    return rows[:k]


class TestBuildIndex:
    def test_date_order_sorts_ascending(self):
        rng = np.random.default_rng(0)
        vectors = rng.standard_normal((3, 4))
        metadata = [
            ("r2", date(2019, 5, 1), "A", "p1"),
            ("r0", date(2017, 5, 1), "A", "p2"),
            ("r1", date(2018, 5, 1), "B", "p3"),
        ]
        index = build_index(vectors, metadata)
        assert [index.grant_dates[i] for i in index.date_order] == sorted(
            m[1] for m in metadata
        )

    def test_vectors_normalized_at_insert(self):
        index = build_index(np.array([[3.0, 4.0]]), [("r0", BASE, "A", "p0")])
        assert np.allclose(index.vectors32[0], [0.6, 0.8], atol=1e-7)

    def test_zero_vector_names_row(self):
        vectors = np.ones((3, 4))
        vectors[2] = 0.0
        with pytest.raises(IndexBuildError, match="row 2"):
            build_index(vectors, make_metadata(3, np.random.default_rng(0)))

    def test_duplicate_record_id_rejected(self):
        vectors = np.ones((2, 3))
        metadata = [("r0", BASE, "A", "p0"), ("r0", BASE, "A", "p1")]
        with pytest.raises(IndexBuildError, match="duplicate"):
            build_index(vectors, metadata)

    def test_metadata_length_mismatch(self):
        with pytest.raises(IndexBuildError, match="metadata"):
            build_index(np.ones((2, 3)), [("r0", BASE, "A", "p0")])


class TestQueryTopk:
    def test_cutoff_before_everything_gives_empty(self):
        rng = np.random.default_rng(1)
        index = build_index(rng.standard_normal((5, 4)), make_metadata(5, rng))
        result = query_topk(index, rng.standard_normal(4), date(1901, 1, 1), k=3)
        assert result.hits == ()

    def test_exact_stored_vector_ranks_first_with_unit_score(self):
        rng = np.random.default_rng(2)
        vectors = rng.standard_normal((20, 8))
        metadata = make_metadata(20, rng)
        index = build_index(vectors, metadata)
        target = 7
        result = query_topk(
            index, vectors[target], metadata[target][1] + timedelta(days=1), k=1
        )
        assert result.hits[0].record_id == metadata[target][0]
        assert abs(result.hits[0].score - 1.0) < 1e-6

    def test_matches_naive_scan_on_random_index(self):
        rng = np.random.default_rng(3)
        vectors = rng.standard_normal((200, 16))
        metadata = make_metadata(200, rng)
        index = build_index(vectors, metadata)
        for _ in range(25):
            q = rng.standard_normal(16)
            cutoff = BASE + timedelta(days=int(rng.integers(0, 1100)))
            k = int(rng.integers(1, 15))
            got = query_topk(index, q, cutoff, k)
            want = naive_scan(index, q, cutoff, k)
            # order and tie-breaks must match exactly; scores agree to the
            # last ulp or two (BLAS accumulates in a different order than
            # the oracle's per-row dots)
            assert [h.record_id for h in got.hits] == [rid for rid, _ in want]
            assert all(
                abs(h.score - s) < 1e-12 for h, (_, s) in zip(got.hits, want)
            )

    def test_tie_break_by_record_id(self):
        # identical vectors force identical scores
        vectors = np.tile(np.array([[1.0, 0.0]]), (4, 1))
        metadata = [(rid, BASE, "A", f"p-{rid}") for rid in ("r3", "r1", "r2", "r0")]
        index = build_index(vectors, metadata)
        result = query_topk(index, np.array([1.0, 0.0]), BASE + timedelta(days=1), k=3)
        assert [h.record_id for h in result.hits] == ["r0", "r1", "r2"]

    def test_fewer_eligible_than_k(self):
        rng = np.random.default_rng(4)
        vectors = rng.standard_normal((3, 4))
        metadata = [
            ("r0", date(2018, 1, 1), "A", "p0"),
            ("r1", date(2018, 6, 1), "A", "p1"),
            ("r2", date(2019, 1, 1), "A", "p2"),
        ]
        index = build_index(vectors, metadata)
        result = query_topk(index, rng.standard_normal(4), date(2018, 7, 1), k=10)
        assert len(result.hits) == 2

    def test_exclude_patent_and_record(self):
        rng = np.random.default_rng(5)
        vectors = rng.standard_normal((4, 4))
        metadata = [
            ("r0", BASE, "A", "pX"),
            ("r1", BASE, "A", "pX"),
            ("r2", BASE, "A", "pY"),
            ("r3", BASE, "A", "pZ"),
        ]
        index = build_index(vectors, metadata)
        cutoff = BASE + timedelta(days=1)
        got = query_topk(index, rng.standard_normal(4), cutoff, k=10, exclude_patent="pX")
        assert {h.record_id for h in got.hits} == {"r2", "r3"}
        got = query_topk(index, rng.standard_normal(4), cutoff, k=10, exclude_record="r3")
        assert {h.record_id for h in got.hits} == {"r0", "r1", "r2"}

    def test_dim_mismatch_rejected(self):
        rng = np.random.default_rng(6)
        index = build_index(rng.standard_normal((3, 4)), make_metadata(3, rng))
        with pytest.raises(QueryError, match="dim"):
            query_topk(index, rng.standard_normal(5), BASE, k=1)

    def test_zero_query_rejected(self):
        rng = np.random.default_rng(7)
        index = build_index(rng.standard_normal((3, 4)), make_metadata(3, rng))
        with pytest.raises(QueryError, match="zero"):
            query_topk(index, np.zeros(4), BASE, k=1)

    def test_bad_k_rejected(self):
        rng = np.random.default_rng(8)
        index = build_index(rng.standard_normal((3, 4)), make_metadata(3, rng))
        with pytest.raises(QueryError, match="k"):
            query_topk(index, np.ones(4), BASE, k=0)

    @given(
        n=st.integers(1, 60),
        seed=st.integers(0, 10_000),
        cutoff_days=st.integers(-10, 1200),
        k=st.integers(1, 12),
    )
    @settings(max_examples=120, deadline=None)
    def test_temporal_safety_property(self, n, seed, cutoff_days, k):
        rng = np.random.default_rng(seed)
        index = build_index(rng.standard_normal((n, 6)), make_metadata(n, rng))
        cutoff = BASE + timedelta(days=cutoff_days)
        result = query_topk(index, rng.standard_normal(6), cutoff, k=k)
        assert all(h.grant_date < cutoff for h in result.hits)
        scores = [h.score for h in result.hits]
        assert all(-1.0 - 1e-9 <= s <= 1.0 + 1e-9 for s in scores)
        assert scores == sorted(scores, reverse=True)


class TestQueryBatch:
    def test_batch_of_one_equals_single_query(self):
        rng = np.random.default_rng(9)
        index = build_index(rng.standard_normal((30, 5)), make_metadata(30, rng))
        q = rng.standard_normal((1, 5))
        cutoff = BASE + timedelta(days=600)
        batch = query_batch(index, q, [cutoff], k=5)
        single = query_topk(index, q[0], cutoff, k=5)
        assert batch[0].hits == single.hits

    def test_permuting_queries_permutes_results(self):
        rng = np.random.default_rng(10)
        index = build_index(rng.standard_normal((40, 5)), make_metadata(40, rng))
        queries = rng.standard_normal((6, 5))
        cutoffs = [BASE + timedelta(days=int(rng.integers(0, 1100))) for _ in range(6)]
        forward = query_batch(index, queries, cutoffs, k=4)
        perm = [3, 1, 5, 0, 2, 4]
        shuffled = query_batch(index, queries[perm], [cutoffs[i] for i in perm], k=4)
        for out_pos, in_pos in enumerate(perm):
            assert shuffled[out_pos].hits == forward[in_pos].hits

    def test_length_mismatch_rejected(self):
        rng = np.random.default_rng(11)
        index = build_index(rng.standard_normal((5, 3)), make_metadata(5, rng))
        with pytest.raises(QueryError, match="cutoffs"):
            query_batch(index, rng.standard_normal((2, 3)), [BASE], k=1)


class TestPirvPersistence:
    def test_roundtrip_is_byte_identical(self, tmp_path):
        rng = np.random.default_rng(12)
        index = build_index(rng.standard_normal((50, 8)), make_metadata(50, rng))
        p1, p2 = tmp_path / "a.pirv", tmp_path / "b.pirv"
        dump_index(index, p1)
        dump_index(load_index(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_roundtrip_preserves_query_results(self, tmp_path):
        rng = np.random.default_rng(13)
        index = build_index(rng.standard_normal((80, 6)), make_metadata(80, rng))
        path = tmp_path / "x.pirv"
        dump_index(index, path)
        loaded = load_index(path)
        for _ in range(10):
            q = rng.standard_normal(6)
            cutoff = BASE + timedelta(days=int(rng.integers(0, 1100)))
            a = query_topk(index, q, cutoff, k=7)
            b = query_topk(loaded, q, cutoff, k=7)
            assert a.hits == b.hits

    def test_empty_index_roundtrips(self, tmp_path):
        index = build_index(np.zeros((0, 4)), [])
        path = tmp_path / "empty.pirv"
        dump_index(index, path)
        loaded = load_index(path)
        assert len(loaded) == 0
        assert loaded.dim == 4

    def test_corrupt_magic(self, tmp_path):
        rng = np.random.default_rng(14)
        path = tmp_path / "bad.pirv"
        dump_index(build_index(rng.standard_normal((3, 4)), make_metadata(3, rng)), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(PirvFormatError) as excinfo:
            load_index(path)
        assert excinfo.value.code == "bad_magic"

    def test_bad_version(self, tmp_path):
        rng = np.random.default_rng(15)
        path = tmp_path / "bad.pirv"
        dump_index(build_index(rng.standard_normal((3, 4)), make_metadata(3, rng)), path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(PirvFormatError) as excinfo:
            load_index(path)
        assert excinfo.value.code == "bad_version"

    def test_truncated_file(self, tmp_path):
        rng = np.random.default_rng(16)
        path = tmp_path / "bad.pirv"
        dump_index(build_index(rng.standard_normal((3, 4)), make_metadata(3, rng)), path)
        blob = path.read_bytes()
        for cut in (2, 20, len(blob) - 3):
            path.write_bytes(blob[:cut])
            with pytest.raises(PirvFormatError) as excinfo:
                load_index(path)
            assert excinfo.value.code == "truncated"

    def test_trailing_data(self, tmp_path):
        rng = np.random.default_rng(17)
        path = tmp_path / "bad.pirv"
        dump_index(build_index(rng.standard_normal((3, 4)), make_metadata(3, rng)), path)
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(PirvFormatError) as excinfo:
            load_index(path)
        assert excinfo.value.code == "trailing_data"

    def test_metadata_count_mismatch(self, tmp_path):
        path = tmp_path / "bad.pirv"
        # hand-build a file whose metadata block holds one line too few
        vectors = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
        meta = json.dumps(
            {"record_id": "r0", "grant_date": "2018-01-01", "class_id": "A", "patent_id": "p"},
            separators=(",", ":"),
        ).encode() + b"\n"
        import struct

        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sIIQ", b"PIRV", 1, 2, 2))
            fh.write(vectors.tobytes())
            fh.write(struct.pack("<Q", len(meta)))
            fh.write(meta)
        with pytest.raises(PirvFormatError) as excinfo:
            load_index(path)
        assert excinfo.value.code == "bad_metadata"

    def test_identical_inputs_identical_bytes(self, tmp_path):
        rng1 = np.random.default_rng(18)
        rng2 = np.random.default_rng(18)
        p1, p2 = tmp_path / "a.pirv", tmp_path / "b.pirv"
        dump_index(build_index(rng1.standard_normal((10, 4)), make_metadata(10, rng1)), p1)
        dump_index(build_index(rng2.standard_normal((10, 4)), make_metadata(10, rng2)), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_raw_embeddings_roundtrip(self, tmp_path):
        rng = np.random.default_rng(19)
        matrix = rng.standard_normal((6, 12)).astype(np.float32)
        metadata = make_metadata(6, rng)
        path = tmp_path / "emb.pirv"
        save_embeddings(path, matrix, metadata)
        loaded, meta2 = load_embeddings(path)
        assert np.array_equal(loaded.astype(np.float32), matrix)
        assert meta2 == metadata

    def test_unnormalized_vectors_rejected_at_index_load(self, tmp_path):
        rng = np.random.default_rng(20)
        path = tmp_path / "emb.pirv"
        save_embeddings(path, rng.standard_normal((4, 8)) * 3.0, make_metadata(4, rng))
        with pytest.raises(IndexBuildError, match="unit-normalized"):
            load_index(path)

    def test_write_pirv_validates_lengths(self, tmp_path):
        with pytest.raises(ValueError, match="metadata"):
            write_pirv(tmp_path / "x.pirv", np.zeros((2, 2), dtype=np.float32), [])

    def test_read_pirv_returns_float32(self, tmp_path):
        rng = np.random.default_rng(21)
        path = tmp_path / "emb.pirv"
        save_embeddings(path, rng.standard_normal((3, 4)), make_metadata(3, rng))
        vectors, _ = read_pirv(path)
        assert vectors.dtype == np.float32
