from __future__ import annotations

import math

import numpy as np
import pytest

from corpusforge.corpus import read_shards
from corpusforge.minhash import (
    DuplicateClusters,
    MinHashParams,
    MinHashSignature,
    SignatureWriter,
    bucket_keys,
    cluster,
    compute_signatures,
    estimate_jaccard,
    filter_duplicates,
    generate_candidate_pairs,
    minhash_dedup,
    read_cluster_map,
    read_pairs,
    read_signatures,
    shingle,
    sign_document,
    signature,
    write_cluster_map,
    write_pairs,
)
from corpusforge.tokenizers import WhitespaceTokenizer

from conftest import make_docs, random_words, write_corpus
from minhash_stats import (
    agreement_rates,
    band_collision_rate,
    batch_signatures,
    exact_jaccard_pairs,
    lsh_collision_probability,
)

PARAMS = MinHashParams(bands=20, rows_per_band=20, shingle_size=5, hash_seed=0)


# ---------------------------------------------------------------------------
# Shingling

def test_short_doc_falls_back_to_whole_text():
    assert len(shingle("a b c", 5)) == 1


def test_shingle_count_law():
    assert len(shingle("a b c d e f", 5)) == 2


def test_whitespace_runs_do_not_matter():
    assert shingle("a  b\tc   d e f", 5) == shingle("a b c d e f", 5)


def test_shingles_are_case_insensitive():
    assert shingle("Alpha Beta Gamma Delta Epsilon Zeta", 5) == shingle(
        "alpha beta gamma delta epsilon zeta", 5
    )


def test_empty_text_yields_singleton():
    assert len(shingle("", 5)) == 1


# ---------------------------------------------------------------------------
# Signatures

def test_identical_docs_identical_signatures():
    text = " ".join(random_words(np.random.default_rng(0), 40))
    a = sign_document("a", text, PARAMS)
    b = sign_document("b", text, PARAMS)
    assert np.array_equal(a.values, b.values)


def test_seed_changes_signature():
    shingles = shingle("one two three four five six seven eight", 5)
    a = signature(shingles, PARAMS)
    b = signature(shingles, MinHashParams(20, 20, 5, hash_seed=99))
    assert not np.array_equal(a, b)


def test_empty_shingle_set_rejected():
    with pytest.raises(ValueError, match="empty shingle"):
        signature(set(), PARAMS)


def test_signature_shape_and_range():
    sig = sign_document("x", " ".join(random_words(np.random.default_rng(1), 30)), PARAMS)
    assert sig.values.shape == (20, 20)
    assert sig.values.max() < (1 << 61) - 1


def test_self_jaccard_is_one():
    sig = sign_document("x", "alpha beta gamma delta epsilon zeta eta", PARAMS)
    assert estimate_jaccard(sig, sig) == 1.0


def test_param_mismatch_rejected():
    text = "alpha beta gamma delta epsilon zeta eta"
    a = sign_document("a", text, PARAMS)
    b = sign_document("b", text, MinHashParams(10, 10, 5, 0))
    with pytest.raises(ValueError, match="params differ"):
        estimate_jaccard(a, b)


def test_half_jaccard_pair_agreement_within_binomial_bound():
    rng = np.random.default_rng(5)
    a_sh, b_sh = exact_jaccard_pairs(1, 0.5, rng)
    a = MinHashSignature("a", batch_signatures(a_sh, PARAMS)[0].reshape(20, 20), PARAMS.key())
    b = MinHashSignature("b", batch_signatures(b_sh, PARAMS)[0].reshape(20, 20), PARAMS.key())
    bound = 3 * math.sqrt(0.5 * 0.5 / 400)  # ~0.075
    assert abs(estimate_jaccard(a, b) - 0.5) <= bound


def test_disjoint_pairs_estimate_near_zero():
    rng = np.random.default_rng(6)
    n = 1000
    a_sh = rng.integers(0, 1 << 63, size=(n, 40), dtype=np.uint64)
    b_sh = rng.integers(0, 1 << 63, size=(n, 40), dtype=np.uint64)
    rates = agreement_rates(batch_signatures(a_sh, PARAMS), batch_signatures(b_sh, PARAMS))
    assert rates.mean() < 0.01
    assert rates.max() <= 0.03


def test_estimator_mean_tracks_true_jaccard():
    rng = np.random.default_rng(7)
    for j in (0.25, 0.75):
        a_sh, b_sh = exact_jaccard_pairs(2000, j, rng)
        rates = agreement_rates(batch_signatures(a_sh, PARAMS), batch_signatures(b_sh, PARAMS))
        assert abs(rates.mean() - j) < 0.01


# ---------------------------------------------------------------------------
# Banding

def test_identical_signatures_share_all_band_keys():
    text = " ".join(random_words(np.random.default_rng(2), 25))
    a = sign_document("a", text, PARAMS)
    b = sign_document("b", text, PARAMS)
    assert bucket_keys(a) == bucket_keys(b)


def test_single_value_change_flips_exactly_one_band_key():
    sig = sign_document("a", " ".join(random_words(np.random.default_rng(3), 25)), PARAMS)
    altered = MinHashSignature(sig.doc_id, sig.values.copy(), sig.params_key)
    altered.values[7, 3] ^= np.uint64(1)
    before, after = bucket_keys(sig), bucket_keys(altered)
    assert sum(x != y for x, y in zip(before, after)) == 1
    assert before[7] != after[7]


def test_band_collision_rate_matches_closed_form():
    rng = np.random.default_rng(8)
    s = 0.9
    a_sh, b_sh = exact_jaccard_pairs(2000, s, rng)
    rate = band_collision_rate(batch_signatures(a_sh, PARAMS), batch_signatures(b_sh, PARAMS), PARAMS)
    expected = lsh_collision_probability(s, 20, 20)
    sigma = math.sqrt(expected * (1 - expected) / 2000)
    assert abs(rate - expected) <= 3 * sigma


# ---------------------------------------------------------------------------
# Clustering

def test_transitive_pairs_form_one_cluster():
    clusters = cluster([("A", "B"), ("B", "C")])
    assert clusters.clusters() == [["A", "B", "C"]]


def test_no_pairs_no_clusters():
    assert cluster([]).clusters() == []


def bfs_components(n_nodes: int, pairs) -> list[list[str]]:
    adjacency: dict[str, set[str]] = {}
    for a, b in pairs:
        adjacency.setdefault(a, set()).add(b)
        adjacency.setdefault(b, set()).add(a)
    seen: set[str] = set()
    components = []
    for node in sorted(adjacency):
        if node in seen:
            continue
        frontier, members = [node], []
        seen.add(node)
        while frontier:
            current = frontier.pop()
            members.append(current)
            for neighbor in adjacency[current]:
                if neighbor not in seen:
                    seen.add(neighbor)
                    frontier.append(neighbor)
        components.append(sorted(members))
    return sorted(components, key=lambda m: m[0])


def test_random_pair_graphs_match_bfs_oracle():
    rng = np.random.default_rng(9)
    for _ in range(25):
        n = int(rng.integers(10, 200))
        n_pairs = int(rng.integers(0, 3 * n))
        pairs = [
            (f"n{int(rng.integers(n)):03d}", f"n{int(rng.integers(n)):03d}")
            for _ in range(n_pairs)
        ]
        pairs = [(a, b) for a, b in pairs if a != b]
        got = cluster(pairs).clusters()
        assert got == bfs_components(n, pairs)


def test_cluster_is_order_insensitive():
    rng = np.random.default_rng(10)
    pairs = [(f"n{int(rng.integers(50)):02d}", f"n{int(rng.integers(50)):02d}") for _ in range(80)]
    pairs = [(a, b) for a, b in pairs if a != b]
    shuffled = list(pairs)
    rng.shuffle(shuffled)
    assert cluster(pairs).clusters() == cluster(shuffled).clusters()


# ---------------------------------------------------------------------------
# Candidate pair generation and file formats

def corpus_with_copies(tmp_path, n_originals=100, n_copies=50, seed=11):
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(n_originals):
        docs.append(
            type(make_docs(1)[0])(id=f"doc-{i:03d}", text=" ".join(random_words(rng, 80)))
        )
    for i in range(n_copies):
        base = docs[i]
        docs.append(type(base)(id=f"dup-{i:03d}", text=base.text + " tailword"))
    manifest, _ = write_corpus(docs, tmp_path / "corpus")
    return manifest, docs


def test_signature_file_round_trip(tmp_path):
    docs = make_docs(20, seed=12, words_per_doc=30)
    sigs = [sign_document(d.id, d.text, PARAMS) for d in docs]
    path = tmp_path / "sigs.bin"
    with SignatureWriter(path, PARAMS) as writer:
        for sig in sigs:
            writer.write(sig)
    back = list(read_signatures(path))
    assert [s.doc_id for s in back] == [s.doc_id for s in sigs]
    assert all(np.array_equal(a.values, b.values) for a, b in zip(back, sigs))
    assert back[0].params_key == PARAMS.key()


def test_pair_and_cluster_files_round_trip(tmp_path):
    pairs = [("a", "b"), ("b", "c"), ("x", "y")]
    pairs_path = tmp_path / "pairs.bin"
    assert write_pairs(pairs_path, pairs) == 3
    assert list(read_pairs(pairs_path)) == pairs

    clusters = cluster(pairs)
    map_path = tmp_path / "clusters.bin"
    write_cluster_map(map_path, clusters)
    assert read_cluster_map(map_path).clusters() == clusters.clusters()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="bad magic"):
        list(read_signatures(path))


def test_candidate_pairs_connect_duplicates(tmp_path):
    manifest, docs = corpus_with_copies(tmp_path)
    sigs = [sign_document(d.id, d.text, PARAMS) for d in docs]
    pairs = list(generate_candidate_pairs(sigs, tmp_path))
    clusters = cluster(pairs)
    clustered = {m for members in clusters.clusters() for m in members}
    hits = sum(1 for i in range(50) if f"dup-{i:03d}" in clustered and f"doc-{i:03d}" in clustered)
    assert hits >= 48


def test_external_sort_spill_paths_agree(tmp_path):
    manifest, docs = corpus_with_copies(tmp_path, n_originals=40, n_copies=20, seed=13)
    sigs = [sign_document(d.id, d.text, PARAMS) for d in docs]
    small = sorted(generate_candidate_pairs(sigs, tmp_path, max_buffered=17))
    large = sorted(generate_candidate_pairs(sigs, tmp_path, max_buffered=1_000_000))
    assert small == large
    assert not list(tmp_path.glob("bandrun-*"))  # spill runs cleaned up


def test_worker_count_does_not_change_signatures(tmp_path):
    docs = make_docs(300, seed=14, words_per_doc=25)
    serial = [s.values for s in compute_signatures(iter(docs), PARAMS, workers=1)]
    threaded = [s.values for s in compute_signatures(iter(docs), PARAMS, workers=4)]
    assert len(serial) == len(threaded)
    assert all(np.array_equal(a, b) for a, b in zip(serial, threaded))


# ---------------------------------------------------------------------------
# Filtering

def test_keep_smallest_id_per_cluster(tmp_path):
    docs = make_docs(3, seed=15)
    docs[0].id, docs[1].id, docs[2].id = "A", "B", "C"
    manifest, _ = write_corpus(docs, tmp_path / "c")
    clusters = cluster([("A", "B"), ("B", "C")])
    out, stats = filter_duplicates(clusters, manifest, tmp_path / "out")
    assert [d.id for d in read_shards(out.shards)] == ["A"]
    assert stats.removed == 2


def test_all_singletons_pass_through(tmp_path):
    docs = make_docs(10, seed=16)
    manifest, _ = write_corpus(docs, tmp_path / "c")
    out, stats = filter_duplicates(DuplicateClusters(), manifest, tmp_path / "out")
    assert out.doc_count == 10
    assert stats.removed == 0


def test_planted_near_copies_are_removed(tmp_path):
    manifest, docs = corpus_with_copies(tmp_path)
    out, stats = minhash_dedup(
        manifest, PARAMS, tmp_path / "work", tmp_path / "out", tokenizer=WhitespaceTokenizer()
    )
    kept = {d.id for d in read_shards(out.shards)}
    originals = {f"doc-{i:03d}" for i in range(100)}
    copies = {f"dup-{i:03d}" for i in range(50)}
    assert originals <= kept  # no originals lost
    assert len(copies - kept) >= 48  # >= 48 of 50 copies removed


def test_dedup_is_idempotent(tmp_path):
    manifest, _ = corpus_with_copies(tmp_path, seed=17)
    once, _ = minhash_dedup(manifest, PARAMS, tmp_path / "w1", tmp_path / "o1")
    twice, stats = minhash_dedup(once, PARAMS, tmp_path / "w2", tmp_path / "o2")
    assert stats.removed == 0
    assert [d.id for d in read_shards(twice.shards)] == [d.id for d in read_shards(once.shards)]


def test_corpus_order_does_not_change_kept_set(tmp_path):
    rng = np.random.default_rng(18)
    _, docs = corpus_with_copies(tmp_path, seed=19)
    shuffled = list(docs)
    rng.shuffle(shuffled)
    m1, _ = write_corpus(list(docs), tmp_path / "c1")
    m2, _ = write_corpus(shuffled, tmp_path / "c2")
    out1, _ = minhash_dedup(m1, PARAMS, tmp_path / "w1", tmp_path / "o1")
    out2, _ = minhash_dedup(m2, PARAMS, tmp_path / "w2", tmp_path / "o2")
    assert {d.id for d in read_shards(out1.shards)} == {d.id for d in read_shards(out2.shards)}


def test_provenance_appended(tmp_path):
    manifest, _ = corpus_with_copies(tmp_path, n_originals=10, n_copies=5, seed=20)
    out, _ = minhash_dedup(manifest, PARAMS, tmp_path / "w", tmp_path / "o")
    assert out.provenance == ["ingest", "minhash-filter"]
