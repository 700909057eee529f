import random
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oncoagent.corpus import CuratedDocument
from oncoagent.errors import DimensionError, IndexFormatError, IntegrityError
from oncoagent.index import (
    REMOTE_DIMENSION,
    Chunk,
    HTTPEmbedder,
    MockEmbedder,
    VectorIndex,
    build_index,
    chunk_document,
    chunk_offsets,
    cosine,
    embed,
    tokenize,
)

from .oracles import brute_chunk_offsets, brute_search, py_cosine


def doc_of(n_tokens: int, doc_id: str = "d") -> CuratedDocument:
    return CuratedDocument(doc_id, {"source": "custom", "title": doc_id}, " ".join(f"t{i}" for i in range(n_tokens)))


# ---------------------------------------------------------------- tokenizer


@pytest.mark.parametrize("text, tokens", [
    ("BRAF V600E.", ["BRAF", "V600E", "."]),
    ("", []),
    ("a  b", ["a", "b"]),
    ("x,y;(z)", ["x", ",", "y", ";", "(", "z", ")"]),
])
def test_tokenize_examples(text, tokens):
    assert tokenize(text) == tokens


@given(st.text())
def test_tokens_contain_no_whitespace(text):
    assert all(tok and not any(c.isspace() for c in tok) for tok in tokenize(text))


# ---------------------------------------------------------------- chunker


def test_chunk_exact_fit():
    chunks = chunk_document(doc_of(512), [512])
    assert [(c.token_start, c.token_len) for c in chunks] == [(0, 512)]


def test_chunk_thousand_tokens():
    assert chunk_offsets(1000, 512, 50) == [(0, 512), (462, 512), (924, 76)]


def test_chunk_short_doc():
    assert [(c.token_start, c.token_len) for c in chunk_document(doc_of(100), [128])] == [(0, 100)]


def test_chunk_rejects_large_overlap():
    with pytest.raises(ValueError):
        chunk_document(doc_of(10), [128, 50], overlap=50)


def test_chunk_ids_and_metadata():
    chunks = chunk_document(doc_of(300, "g1"))
    assert {c.window for c in chunks} == {512, 256, 128}
    c = next(c for c in chunks if c.window == 256 and c.token_start == 206)
    assert c.chunk_id == "g1:w256:t206"
    assert c.metadata["doc_id"] == "g1" and c.metadata["window"] == 256 and c.metadata["title"] == "g1"
    assert tokenize(c.text) == [f"t{i}" for i in range(206, 300)]


def test_chunker_oracle_randomized():
    rng = random.Random(11)
    for _ in range(200):
        n = rng.randint(1, 5000)
        doc = doc_of(n)
        chunks = chunk_document(doc, [512, 256, 128], 50)
        for w in (512, 256, 128):
            got = [(c.token_start, c.token_len) for c in chunks if c.window == w]
            assert got == brute_chunk_offsets(n, w, 50)
            covered = set()
            for s, ln in got:
                covered.update(range(s, s + ln))
            assert covered == set(range(n))


@given(st.integers(1, 3000), st.sampled_from([512, 256, 128, 64]), st.integers(0, 60))
def test_chunk_invariants(n, w, overlap):
    if overlap >= w:
        return
    offs = chunk_offsets(n, w, overlap)
    assert offs == brute_chunk_offsets(n, w, overlap)
    assert all(1 <= ln <= w for _, ln in offs)
    for (s0, l0), (s1, _) in zip(offs, offs[1:]):
        assert s1 == s0 + w - overlap
        assert s0 + l0 - s1 == overlap  # consecutive windows share exactly `overlap` tokens
    assert offs[-1][0] + offs[-1][1] == n


# ---------------------------------------------------------------- embeddings


def test_mock_embedder_deterministic_and_shaped():
    e = MockEmbedder(16)
    a, b = embed(["BRAF V600E", "BRAF V600E"], e)
    assert a.shape == (16,) and np.array_equal(a, b)
    assert np.isclose(np.linalg.norm(a), 1.0)
    assert np.array_equal(embed(["BRAF V600E"], MockEmbedder(16))[0], a)


def test_remote_default_dimension():
    assert HTTPEmbedder("http://unused", "m").dimension == REMOTE_DIMENSION == 3072


def test_embed_rejects_empty_text():
    with pytest.raises(ValueError):
        embed(["ok", " "], MockEmbedder(8))


def test_embed_dimension_mismatch():
    class Bad:
        name, dimension = "bad", 8

        def embed(self, texts):
            return np.ones((len(texts), 7))

    with pytest.raises(IntegrityError):
        embed(["x"], Bad())


# ---------------------------------------------------------------- search


def random_index(n: int, dim: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((n, dim))
    ids = [f"c{i:04d}" for i in rng.permutation(n)]
    idx = VectorIndex(dim)
    meta = [{"window": int(rng.choice([512, 256, 128])), "doc_id": f"d{i % 7}"} for i in range(n)]
    idx.add([Chunk(m["doc_id"], cid, m["window"], 0, 1, f"text {cid}", m) for cid, m in zip(ids, meta)], vecs)
    return idx, ids, vecs, meta


def test_self_similarity():
    idx, ids, vecs, _ = random_index(50, 12)
    (top, score), *_ = idx.search(vecs[17], 3)
    assert top == ids[17] and score == pytest.approx(1.0, abs=1e-6)


def test_orthogonal_query():
    idx = VectorIndex(4)
    idx.add([Chunk("d", f"c{i}", 128, 0, 1, "x") for i in range(2)], [[1, 0, 0, 0], [0, 1, 0, 0]])
    assert all(abs(s) < 1e-6 for _, s in idx.search([0, 0, 1, 0], 2))


def test_ties_break_on_chunk_id():
    idx = VectorIndex(3)
    idx.add([Chunk("d", cid, 128, 0, 1, "x") for cid in ("b", "c", "a")], [[1, 0, 0]] * 3)
    assert [cid for cid, _ in idx.search([1, 0, 0], 3)] == ["a", "b", "c"]
    assert [cid for cid, _ in idx.search([1, 0, 0], 2)] == ["a", "b"]


def test_search_errors():
    idx, *_ = random_index(5, 4)
    with pytest.raises(DimensionError):
        idx.search(np.ones(5), 1)
    with pytest.raises(ValueError):
        idx.search(np.ones(4), 0)
    assert VectorIndex(4).search(np.ones(4), 3) == []


def test_search_matches_brute_force_oracle():
    idx, ids, vecs, _ = random_index(1000, 32, seed=3)
    items = list(zip(ids, vecs.tolist()))
    rng = np.random.default_rng(4)
    for _ in range(100):
        q = rng.standard_normal(32)
        got = idx.search(q, 10)
        want = brute_search(items, q.tolist(), 10)
        assert [c for c, _ in got] == [c for c, _ in want]
        assert np.allclose([s for _, s in got], [s for _, s in want], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_full_ranking_equals_oracle(seed):
    idx, ids, vecs, _ = random_index(60, 6, seed)
    q = np.random.default_rng(seed + 1).standard_normal(6)
    got = [c for c, _ in idx.search(q, len(idx))]
    assert got == [c for c, _ in brute_search(list(zip(ids, vecs.tolist())), q.tolist(), len(ids))]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([128, 256, 512]), st.integers(1, 30))
def test_filter_soundness(seed, window, top_n):
    idx, ids, vecs, meta = random_index(80, 6, seed)
    q = np.random.default_rng(seed).standard_normal(6)
    filtered = idx.search(q, top_n, filter={"window": window})
    assert all(idx.chunks[c].metadata["window"] == window for c, _ in filtered)
    assert filtered == idx.search(q, top_n, filter=lambda m: m["window"] == window)
    unfiltered_rank = {c: i for i, (c, _) in enumerate(idx.search(q, len(idx)))}
    ranks = [unfiltered_rank[c] for c, _ in filtered]
    assert ranks == sorted(ranks)
    for i, (c, _) in enumerate(filtered):
        assert unfiltered_rank[c] >= i


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_cosine_symmetry(a, b):
    if not (np.linalg.norm(a) > 1e-6 and np.linalg.norm(b) > 1e-6):
        return
    assert abs(cosine(a, b) - cosine(b, a)) <= 1e-9
    assert cosine(a, b) == pytest.approx(py_cosine(a, b), abs=1e-9)


def test_records_have_norms():
    idx, ids, vecs, _ = random_index(5, 4)
    for rec, v in zip(idx.records(), vecs):
        assert rec.norm == pytest.approx(np.linalg.norm(v), rel=1e-6)


# ---------------------------------------------------------------- persistence


def test_persist_load_round_trip(tmp_path):
    idx = build_index([doc_of(40, "a"), doc_of(20, "b")], MockEmbedder(8), windows=[128])
    assert len(idx) == 2
    idx.add([Chunk("c", "c:w128:t0", 128, 0, 1, "extra", {"doc_id": "c"})], [np.arange(1, 9)])
    idx.persist(tmp_path / "i.bin")
    back = VectorIndex.load(tmp_path / "i.bin")
    assert back.dimension == 8 and back.ids == idx.ids and back.chunks == idx.chunks
    assert np.array_equal(back.vectors, idx.vectors)
    for q in np.random.default_rng(0).standard_normal((5, 8)):
        assert back.search(q, 3) == idx.search(q, 3)


def test_persist_empty(tmp_path):
    VectorIndex(24).persist(tmp_path / "e.bin")
    back = VectorIndex.load(tmp_path / "e.bin")
    assert len(back) == 0 and back.dimension == 24


def test_load_truncated(tmp_path):
    idx, *_ = random_index(10, 4)
    idx.persist(tmp_path / "i.bin")
    data = (tmp_path / "i.bin").read_bytes()
    for cut in (4, 12, 40, len(data) - 3):
        (tmp_path / "t.bin").write_bytes(data[:cut])
        with pytest.raises(IndexFormatError):
            VectorIndex.load(tmp_path / "t.bin")


def test_load_detects_corruption_and_version(tmp_path):
    idx, *_ = random_index(10, 4)
    idx.persist(tmp_path / "i.bin")
    data = bytearray((tmp_path / "i.bin").read_bytes())
    data[-1] ^= 0xFF
    (tmp_path / "c.bin").write_bytes(bytes(data))
    with pytest.raises(IndexFormatError, match="checksum"):
        VectorIndex.load(tmp_path / "c.bin")
    raw = (tmp_path / "i.bin").read_bytes()
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = raw[16 : 16 + hlen].replace(b'"version": 1', b'"version": 9')
    (tmp_path / "v.bin").write_bytes(raw[:8] + struct.pack("<Q", len(header)) + header + raw[16 + hlen :])
    with pytest.raises(IndexFormatError, match="version"):
        VectorIndex.load(tmp_path / "v.bin")
    (tmp_path / "m.bin").write_bytes(b"garbage")
    with pytest.raises(IndexFormatError, match="magic"):
        VectorIndex.load(tmp_path / "m.bin")


def test_concurrent_readers_during_writes():
    from concurrent.futures import ThreadPoolExecutor

    idx = VectorIndex(4)
    vecs = np.random.default_rng(1).standard_normal((200, 1, 4))

    def write(i):
        idx.add([Chunk("d", f"w{i}", 128, 0, 1, "x")], vecs[i])

    def read(_):
        res = idx.search(np.ones(4), 5)
        assert len(res) <= 5

    with ThreadPoolExecutor(8) as pool:
        list(pool.map(lambda i: write(i) if i % 2 else read(i), range(200)))
    assert len(idx) == 100
