from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import pytest
import requests

from corpusforge.corpus import Document
from corpusforge.embedding import (
    EmbedderSpec,
    EmbedderUnavailableError,
    EmbeddingError,
    HashingEmbedder,
    RemoteEmbedder,
    VectorShardWriter,
    chunk_document,
    chunk_vector_id,
    embed_chunks,
    embed_corpus,
    embed_document,
    load_vectors,
    parse_chunk_id,
)
from corpusforge.tokenizers import WhitespaceTokenizer

from conftest import make_docs, write_corpus
from embed_stub import EmbedStub

TOKENIZER = WhitespaceTokenizer()
FIXTURES = Path(__file__).parent / "fixtures"


def words(n: int, base: str = "tok") -> str:
    return " ".join(f"{base}{i}" for i in range(n))


# ---------------------------------------------------------------------------
# Chunking

def test_exact_tiling_1024_tokens():
    chunks = chunk_document(Document(id="d", text=words(1024)), TOKENIZER)
    assert [c.token_end - c.token_start for c in chunks] == [512, 512]


def test_513_tokens_split_512_plus_1():
    chunks = chunk_document(Document(id="d", text=words(513)), TOKENIZER)
    assert [c.token_end - c.token_start for c in chunks] == [512, 1]
    assert chunks[1].text == "tok512"


def test_short_doc_single_chunk():
    chunks = chunk_document(Document(id="d", text=words(100)), TOKENIZER)
    assert len(chunks) == 1
    assert chunks[0].token_start == 0 and chunks[0].token_end == 100


def test_empty_doc_zero_chunks():
    assert chunk_document(Document(id="d", text=""), TOKENIZER) == []


def test_chunk_spans_tile_the_token_sequence():
    doc = Document(id="d", text=words(1300))
    tokens = TOKENIZER.tokenize(doc.text)
    chunks = chunk_document(doc, TOKENIZER)
    rebuilt = []
    expected_start = 0
    for c in chunks:
        assert c.token_start == expected_start
        expected_start = c.token_end
        rebuilt.extend(c.text.split())
    assert rebuilt == tokens


def test_chunk_id_round_trip():
    cid = chunk_vector_id("doc::weird::id", 7)
    assert parse_chunk_id(cid) == ("doc::weird::id", 7)


# ---------------------------------------------------------------------------
# Hashing test embedder

def test_hashing_embedder_unit_norm_and_deterministic():
    emb = HashingEmbedder(EmbedderSpec(dim=64, hash_seed=3))
    v1 = emb.embed(["alpha beta gamma"])
    v2 = emb.embed(["alpha beta gamma"])
    assert np.array_equal(v1, v2)
    assert abs(np.linalg.norm(v1[0]) - 1.0) <= 1e-6


def test_hashing_embedder_matches_independent_reimplementation():
    dim, seed = 32, 11
    emb = HashingEmbedder(EmbedderSpec(dim=dim, hash_seed=seed))

    def stable(data: str, s: int) -> int:
        digest = hashlib.blake2b(data.encode(), digest_size=8, key=struct.pack("<q", s)).digest()
        return int.from_bytes(digest, "little")

    def oracle(text: str) -> np.ndarray:
        counts = np.zeros(dim)
        for token in text.split():
            counts[stable(token, seed) % dim] += 1.0
        jitter = np.array([(stable(f"jitter:{i}", seed) % (1 << 20)) / (1 << 20) for i in range(dim)])
        v = counts + 1e-3 * jitter
        return v / np.linalg.norm(v)

    for text in ["one two two three", "alpha", "x " * 50, "café 中文"]:
        assert np.allclose(emb.embed([text])[0], oracle(text), atol=1e-12)


def test_bag_of_words_permutation_invariance():
    emb = HashingEmbedder(EmbedderSpec(dim=64))
    a = emb.embed(["one two three four"])[0]
    b = emb.embed(["four three two one"])[0]
    assert np.allclose(a, b, atol=1e-15)


# ---------------------------------------------------------------------------
# Document pooling

def test_single_chunk_doc_vector_equals_chunk_vector():
    emb = HashingEmbedder(EmbedderSpec(dim=64))
    doc = Document(id="d", text=words(100))
    doc_vec = embed_document(doc, emb, TOKENIZER)
    chunk_vec = emb.embed([doc.text])[0]
    assert np.allclose(doc_vec.values, chunk_vec, atol=1e-12)


def test_identical_chunks_average_to_same_vector():
    emb = HashingEmbedder(EmbedderSpec(dim=64))
    half = words(512)
    doc = Document(id="d", text=half + " " + half)
    doc_vec = embed_document(doc, emb, TOKENIZER)
    chunk_vec = emb.embed([half])[0]
    assert np.allclose(doc_vec.values, chunk_vec, atol=1e-12)


def test_two_distinct_chunks_mean_then_normalize():
    emb = HashingEmbedder(EmbedderSpec(dim=256))
    a = " ".join(["alpha"] * 512)
    b = " ".join(["bravo"] * 512)
    doc = Document(id="d", text=a + " " + b)
    u = emb.embed([a])[0]
    v = emb.embed([b])[0]
    assert abs(float(u @ v)) < 1e-3  # near-orthogonal up to the jitter floor

    doc_vec = embed_document(doc, emb, TOKENIZER).values
    expected = (u + v) / np.linalg.norm(u + v)
    assert np.allclose(doc_vec, expected, atol=1e-12)
    assert float(doc_vec @ u) == pytest.approx(1 / np.sqrt(2), abs=1e-3)
    assert float(doc_vec @ v) == pytest.approx(1 / np.sqrt(2), abs=1e-3)


def test_empty_doc_returns_none():
    emb = HashingEmbedder(EmbedderSpec(dim=16))
    assert embed_document(Document(id="d", text="  "), emb, TOKENIZER) is None


def test_embed_chunks_order_and_count():
    emb = HashingEmbedder(EmbedderSpec(dim=16, batch_size=3))
    doc = Document(id="d", text=words(2100))
    chunks = chunk_document(doc, TOKENIZER)
    vectors = embed_chunks(chunks, emb)
    assert [v.id for v in vectors] == [chunk_vector_id("d", i) for i in range(len(chunks))]
    direct = emb.embed([c.text for c in chunks])
    assert np.allclose(np.stack([v.values for v in vectors]), direct, atol=1e-15)


# ---------------------------------------------------------------------------
# Vector shards

def test_vector_shard_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "v.bin"
    vectors = rng.normal(size=(10, 8)).astype("<f4")
    writer = VectorShardWriter(path, 8)
    for i, row in enumerate(vectors):
        writer.write(f"id-{i}", row)
    writer.close()
    ids, back = load_vectors(path)
    assert ids == [f"id-{i}" for i in range(10)]
    assert np.array_equal(back, vectors)


def test_vector_shard_rejects_wrong_dim(tmp_path):
    writer = VectorShardWriter(tmp_path / "v.bin", 4)
    with pytest.raises(ValueError, match="shape"):
        writer.write("x", np.zeros(5))
    writer.close()


# ---------------------------------------------------------------------------
# Corpus embedding with resume

def corpus(tmp_path, n=40, words_per_doc=30):
    docs = make_docs(n, seed=21, words_per_doc=words_per_doc)
    return write_corpus(docs, tmp_path / "corpus")


def test_embed_corpus_document_level(tmp_path):
    manifest, _ = corpus(tmp_path)
    spec = EmbedderSpec(dim=32)
    stats = embed_corpus(manifest, spec, TOKENIZER, tmp_path / "v.bin")
    assert stats.vectors == 40
    ids, X = load_vectors(tmp_path / "v.bin")
    assert len(ids) == 40
    assert np.allclose(np.linalg.norm(X, axis=1), 1.0, atol=1e-5)


def test_embed_corpus_skips_empty_docs(tmp_path):
    docs = make_docs(5, seed=22) + [Document(id="zz-empty", text="")]
    manifest, _ = write_corpus(docs, tmp_path / "c")
    stats = embed_corpus(manifest, EmbedderSpec(dim=16), TOKENIZER, tmp_path / "v.bin")
    assert stats.skipped_empty == 1
    ids, _ = load_vectors(tmp_path / "v.bin")
    assert "zz-empty" not in ids


def test_embed_corpus_chunk_level_ids(tmp_path):
    docs = [Document(id="long", text=words(1200)), Document(id="short", text=words(40))]
    manifest, _ = write_corpus(docs, tmp_path / "c")
    embed_corpus(manifest, EmbedderSpec(dim=16), TOKENIZER, tmp_path / "v.bin", level="chunk")
    ids, X = load_vectors(tmp_path / "v.bin")
    assert ids == [chunk_vector_id("long", 0), chunk_vector_id("long", 1), chunk_vector_id("long", 2),
                   chunk_vector_id("short", 0)]
    assert X.shape == (4, 16)


def test_corpus_order_shuffle_leaves_doc_vectors_unchanged(tmp_path):
    docs = make_docs(30, seed=23)
    rng = np.random.default_rng(1)
    shuffled = list(docs)
    rng.shuffle(shuffled)
    m1, _ = write_corpus(list(docs), tmp_path / "c1")
    m2, _ = write_corpus(shuffled, tmp_path / "c2")
    embed_corpus(m1, EmbedderSpec(dim=32), TOKENIZER, tmp_path / "v1.bin")
    embed_corpus(m2, EmbedderSpec(dim=32), TOKENIZER, tmp_path / "v2.bin")
    ids1, X1 = load_vectors(tmp_path / "v1.bin")
    ids2, X2 = load_vectors(tmp_path / "v2.bin")
    lookup = dict(zip(ids2, X2))
    assert all(np.array_equal(lookup[i], x) for i, x in zip(ids1, X1))


class FlakyEmbedder:
    """Delegates to a hashing embedder but dies after a budget of batches."""

    def __init__(self, spec: EmbedderSpec, die_after: int):
        self.spec = spec
        self._inner = HashingEmbedder(spec)
        self.calls = 0
        self.die_after = die_after

    def embed(self, texts):
        self.calls += 1
        if self.calls > self.die_after:
            raise EmbedderUnavailableError("injected failure")
        return self._inner.embed(texts)


def test_embed_corpus_resumes_from_progress_log(tmp_path):
    manifest, _ = corpus(tmp_path, n=60)
    spec = EmbedderSpec(dim=32, batch_size=8)

    embed_corpus(manifest, spec, TOKENIZER, tmp_path / "ref.bin", group_docs=16)
    ref_ids, ref_X = load_vectors(tmp_path / "ref.bin")

    flaky = FlakyEmbedder(spec, die_after=4)
    with pytest.raises(EmbedderUnavailableError):
        embed_corpus(manifest, spec, TOKENIZER, tmp_path / "v.bin", group_docs=16, embedder=flaky)
    progress = Path(str(tmp_path / "v.bin") + ".progress")
    assert progress.exists()  # resumable checkpoint left behind

    stats = embed_corpus(manifest, spec, TOKENIZER, tmp_path / "v.bin", group_docs=16)
    assert stats.resumed_docs > 0
    assert not progress.exists()
    ids, X = load_vectors(tmp_path / "v.bin")
    assert ids == ref_ids
    assert np.array_equal(X, ref_X)


def test_worker_count_does_not_change_output(tmp_path):
    manifest, _ = corpus(tmp_path, n=50, words_per_doc=900)
    spec = EmbedderSpec(dim=32, batch_size=4)
    embed_corpus(manifest, spec, TOKENIZER, tmp_path / "w1.bin", workers=1)
    embed_corpus(manifest, spec, TOKENIZER, tmp_path / "w4.bin", workers=4)
    assert (tmp_path / "w1.bin").read_bytes() == (tmp_path / "w4.bin").read_bytes()


# ---------------------------------------------------------------------------
# Remote embedder against the protocol stub

def test_remote_embedder_basic_round_trip():
    with EmbedStub(dim=64, seed=0) as stub:
        spec = EmbedderSpec(kind="remote-service", dim=64, endpoint=stub.endpoint)
        remote = RemoteEmbedder(spec, backoff_seconds=0.01)
        local = HashingEmbedder(EmbedderSpec(dim=64, hash_seed=0))
        texts = ["alpha beta", "gamma delta epsilon"]
        assert np.allclose(remote.embed(texts), local.embed(texts), atol=1e-12)
        health = remote.health()
        assert health["status"] == "ok" and health["dim"] == 64


def test_remote_retries_transient_failures():
    with EmbedStub(dim=16) as stub:
        stub.fail_remaining = 2
        spec = EmbedderSpec(kind="remote-service", dim=16, endpoint=stub.endpoint)
        remote = RemoteEmbedder(spec, max_retries=4, backoff_seconds=0.01)
        out = remote.embed(["hello world"])
        assert out.shape == (1, 16)
        assert stub.requests_seen == 3  # two failures + one success


def test_remote_gives_up_after_retry_budget():
    with EmbedStub(dim=16) as stub:
        stub.fail_remaining = 99
        spec = EmbedderSpec(kind="remote-service", dim=16, endpoint=stub.endpoint)
        remote = RemoteEmbedder(spec, max_retries=2, backoff_seconds=0.01)
        with pytest.raises(EmbedderUnavailableError):
            remote.embed(["hello"])


def test_remote_unreachable_endpoint_is_stage_fatal_but_resumable(tmp_path):
    manifest, _ = corpus(tmp_path, n=10)
    spec = EmbedderSpec(kind="remote-service", dim=16, endpoint="http://127.0.0.1:9")
    remote = RemoteEmbedder(spec, max_retries=1, backoff_seconds=0.01)
    with pytest.raises(EmbedderUnavailableError):
        embed_corpus(manifest, spec, TOKENIZER, tmp_path / "v.bin", embedder=remote)


def test_remote_dimension_mismatch_is_fatal():
    with EmbedStub(dim=16) as stub:
        stub.wrong_dim = True
        spec = EmbedderSpec(kind="remote-service", dim=16, endpoint=stub.endpoint)
        remote = RemoteEmbedder(spec, backoff_seconds=0.01)
        with pytest.raises(EmbeddingError, match="dimension mismatch"):
            remote.embed(["hello"])


def test_remote_and_test_embedders_are_interchangeable(tmp_path):
    manifest, _ = corpus(tmp_path, n=15)
    with EmbedStub(dim=32, seed=5) as stub:
        remote_spec = EmbedderSpec(kind="remote-service", dim=32, endpoint=stub.endpoint, hash_seed=5)
        local_spec = EmbedderSpec(dim=32, hash_seed=5)
        embed_corpus(manifest, remote_spec, TOKENIZER, tmp_path / "remote.bin",
                     embedder=RemoteEmbedder(remote_spec, backoff_seconds=0.01))
        embed_corpus(manifest, local_spec, TOKENIZER, tmp_path / "local.bin")
        ids_r, X_r = load_vectors(tmp_path / "remote.bin")
        ids_l, X_l = load_vectors(tmp_path / "local.bin")
        assert ids_r == ids_l
        assert np.array_equal(X_r, X_l)


# ---------------------------------------------------------------------------
# Recorded wire-protocol contract, exercised through the client

def load_contract():
    return json.loads((FIXTURES / "embed_contract.json").read_text(encoding="utf-8"))


def test_contract_fixture_cases_pass_through_client():
    contract = load_contract()
    with EmbedStub(dim=48, seed=1) as stub:
        spec = EmbedderSpec(kind="remote-service", dim=48, endpoint=stub.endpoint)
        remote = RemoteEmbedder(spec, backoff_seconds=0.01)
        health = remote.health()
        for case in contract["cases"]:
            texts = case["texts"]
            first = remote.embed(texts)
            again = remote.embed(texts)
            assert first.shape == (len(texts), health["dim"])
            assert np.allclose(np.linalg.norm(first, axis=1), 1.0, atol=1e-6)
            assert np.array_equal(first, again)
            for group in case.get("identical_rows", []):
                for other in group[1:]:
                    assert np.array_equal(first[group[0]], first[other])


def test_contract_fixture_raw_http_shape():
    contract = load_contract()
    proto = contract["protocol"]
    with EmbedStub(dim=24, seed=2) as stub:
        health = requests.get(stub.endpoint + proto["health_path"], timeout=5).json()
        for case in contract["cases"]:
            resp = requests.post(
                stub.endpoint + proto["embed_path"],
                json={proto["request_key"]: case["texts"]},
                timeout=5,
            )
            assert resp.status_code == 200
            payload = resp.json()
            assert payload[proto["response_dim_key"]] == health["dim"]
            vectors = payload[proto["response_vector_key"]]
            assert len(vectors) == len(case["texts"])
            assert all(len(row) == health["dim"] for row in vectors)
