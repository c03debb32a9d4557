"""Semantic deduplication over unit embeddings.

Embeddings are partitioned with seeded K-means, then each cluster is pruned
greedily: members are visited farthest-from-centroid first and one is kept
only if its cosine distance to every already-kept member is at least tau.
A chunk-level variant prunes chunk embeddings and maps survival back to
documents. Prototype pruning reclusters a deduplicated corpus and keeps, per
cluster, only the fixed fraction of points farthest from the centroid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .corpus import CorpusManifest, Document, read_manifest_docs, write_shards
from .embedding import chunk_document, chunk_vector_id, normalize_rows, parse_chunk_id
from .tokenizers import Tokenizer

KEEP_FARTHEST = "farthest-from-centroid"
KEEP_SMALLEST_ID = "smallest-id"

METRIC_DISTANCE = "distance"  # prune when cosine distance < tau
METRIC_SIMILARITY = "similarity"  # prune when cosine similarity > tau

LEVEL_DOCUMENT = "document"
LEVEL_CHUNK = "chunk"


@dataclass
class KMeansModel:
    k: int
    centroids: np.ndarray
    assignments: dict[str, int]
    inertia: float
    seed: int
    iterations_run: int


@dataclass(frozen=True)
class SemDedupConfig:
    n_clusters: int = 1000
    tau: float = 0.15
    level: str = LEVEL_DOCUMENT
    keep_policy: str = KEEP_FARTHEST
    tau_metric: str = METRIC_DISTANCE
    seed: int = 0
    max_iters: int = 100
    tol: float = 1e-6
    cluster_size_cap: int = 20_000
    emit_chunks_as_docs: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.n_clusters < 1:
            raise ValueError(f"n_clusters must be >= 1, got {self.n_clusters}")
        if self.level not in (LEVEL_DOCUMENT, LEVEL_CHUNK):
            raise ValueError(f"unknown level {self.level!r}")
        if self.keep_policy not in (KEEP_FARTHEST, KEEP_SMALLEST_ID):
            raise ValueError(f"unknown keep policy {self.keep_policy!r}")
        if self.tau_metric not in (METRIC_DISTANCE, METRIC_SIMILARITY):
            raise ValueError(f"unknown tau metric {self.tau_metric!r}")


@dataclass(frozen=True)
class D4Config:
    recluster_k: int = 1000
    r_proto: float = 0.75
    seed: int = 0
    max_iters: int = 100
    tol: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.r_proto <= 1.0:
            raise ValueError(f"r_proto must be in (0, 1], got {self.r_proto}")
        if self.recluster_k < 1:
            raise ValueError(f"recluster_k must be >= 1, got {self.recluster_k}")


# ---------------------------------------------------------------------------
# K-means

def kmeans_plusplus_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ start: squared-distance-weighted centroid choices."""
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = X[first]
    closest = np.sum((X - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[i] = X[idx]
        np.minimum(closest, np.sum((X - centroids[i]) ** 2, axis=1), out=closest)
    return centroids


def _assign_all(X: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per row (ties to the smallest index) and squared distances."""
    d2 = (
        np.sum(X * X, axis=1)[:, None]
        - 2.0 * (X @ centroids.T)
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(X.shape[0]), labels]


def kmeans_fit(
    ids: Sequence[str],
    X: np.ndarray,
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> KMeansModel:
    """Lloyd iterations from a k-means++ start, deterministic given the seed.

    Empty clusters are reseeded to the point currently farthest from its
    assigned centroid. Inertia is checked to be non-increasing after every
    assignment pass.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if len(ids) != n:
        raise ValueError(f"{len(ids)} ids for {n} vectors")
    if n < k:
        raise ValueError(f"cannot fit {k} clusters to {n} vectors")

    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus_init(X, k, rng)

    labels, d2 = _assign_all(X, centroids)
    inertia = float(d2.sum())
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        new_centroids = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_centroids[j] = X[members].mean(axis=0)
        # Reseed empty clusters to the farthest points, one per cluster.
        empties = [j for j in range(k) if not (labels == j).any()]
        if empties:
            order = np.argsort(-d2, kind="stable")
            for j, idx in zip(empties, order):
                new_centroids[j] = X[idx]

        shift = float(np.sqrt(np.sum((new_centroids - centroids) ** 2, axis=1)).max())
        centroids = new_centroids
        labels, d2 = _assign_all(X, centroids)
        new_inertia = float(d2.sum())
        if new_inertia > inertia + 1e-9 * max(1.0, inertia):
            raise AssertionError(
                f"k-means inertia increased: {inertia} -> {new_inertia} at iteration {iterations}"
            )
        inertia = new_inertia
        if shift < tol:
            break

    assignments = {doc_id: int(label) for doc_id, label in zip(ids, labels)}
    return KMeansModel(k, centroids, assignments, inertia, seed, iterations)


def assign(model: KMeansModel, v: np.ndarray) -> int:
    """Nearest centroid index for one vector; ties go to the smallest index."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.centroids.shape[1],):
        raise ValueError(f"vector shape {v.shape} does not match centroid dim {model.centroids.shape[1]}")
    d2 = np.sum((model.centroids - v) ** 2, axis=1)
    return int(np.argmin(d2))


# ---------------------------------------------------------------------------
# Pruning

def prune_cluster(
    members: Sequence[tuple[str, np.ndarray, float]],
    tau: float,
    keep_policy: str = KEEP_FARTHEST,
    tau_metric: str = METRIC_DISTANCE,
) -> set[str]:
    """Greedy kept-set of one cluster's (id, unit vector, centroid distance).

    Members are visited farthest-from-centroid first (ties by id), or in id
    order under the smallest-id policy. A member is kept only when its cosine
    distance to every kept member is at least tau; strictly closer members
    are pruned.
    """
    if keep_policy == KEEP_FARTHEST:
        order = sorted(members, key=lambda m: (-m[2], m[0]))
    elif keep_policy == KEEP_SMALLEST_ID:
        order = sorted(members, key=lambda m: m[0])
    else:
        raise ValueError(f"unknown keep policy {keep_policy!r}")

    kept_ids: list[str] = []
    kept_rows: list[np.ndarray] = []
    kept_matrix: np.ndarray | None = None
    for member_id, vector, _ in order:
        if kept_matrix is None:
            kept_ids.append(member_id)
            kept_rows.append(vector)
            kept_matrix = np.vstack(kept_rows)
            continue
        best = float(np.max(kept_matrix @ vector))
        if tau_metric == METRIC_DISTANCE:
            duplicate = (1.0 - best) < tau
        else:
            duplicate = best > tau
        if not duplicate:
            kept_ids.append(member_id)
            kept_rows.append(vector)
            kept_matrix = np.vstack(kept_rows)
    return set(kept_ids)


def _split_oversize(
    ids: list[str], X: np.ndarray, cap: int, seed: int
) -> Iterator[tuple[list[str], np.ndarray]]:
    """Recursively bisect clusters above the size cap with k=2 K-means."""
    if len(ids) <= cap or len(ids) < 2:
        yield ids, X
        return
    model = kmeans_fit(ids, X, 2, seed=seed)
    for side in (0, 1):
        mask = np.array([model.assignments[i] == side for i in ids])
        if not mask.any() or mask.all():
            yield ids, X  # degenerate split, give up on capping this cluster
            return
    for side in (0, 1):
        mask = np.array([model.assignments[i] == side for i in ids])
        sub_ids = [i for i, m in zip(ids, mask) if m]
        yield from _split_oversize(sub_ids, X[mask], cap, seed + 1)


@dataclass
class SemDedupReport:
    level: str
    n_clusters: int
    items: int = 0
    kept_items: int = 0
    docs_in: int = 0
    docs_kept: int = 0
    cluster_sizes: list[int] = field(default_factory=list)
    removed_per_cluster: list[int] = field(default_factory=list)

    @property
    def removal_fraction(self) -> float:
        return 0.0 if self.docs_in == 0 else 1.0 - self.docs_kept / self.docs_in


def dedup_embeddings(
    ids: Sequence[str],
    X: np.ndarray,
    cfg: SemDedupConfig,
) -> tuple[set[str], KMeansModel, SemDedupReport]:
    """Cluster unit vectors and prune within clusters; returns kept ids."""
    X = normalize_rows(X)
    k = min(cfg.n_clusters, len(ids))
    model = kmeans_fit(ids, X, k, seed=cfg.seed, max_iters=cfg.max_iters, tol=cfg.tol)

    report = SemDedupReport(level=cfg.level, n_clusters=k, items=len(ids))
    id_list = list(ids)
    labels = np.array([model.assignments[i] for i in id_list])
    kept: set[str] = set()
    for j in range(k):
        mask = labels == j
        if not mask.any():
            report.cluster_sizes.append(0)
            report.removed_per_cluster.append(0)
            continue
        cluster_ids = [i for i, m in zip(id_list, mask) if m]
        cluster_X = X[mask]
        cluster_kept: set[str] = set()
        for sub_ids, sub_X in _split_oversize(cluster_ids, cluster_X, cfg.cluster_size_cap, cfg.seed):
            centroid = sub_X.mean(axis=0)
            dists = np.sqrt(np.maximum(np.sum((sub_X - centroid) ** 2, axis=1), 0.0))
            members = [(i, v, float(d)) for i, v, d in zip(sub_ids, sub_X, dists)]
            cluster_kept |= prune_cluster(members, cfg.tau, cfg.keep_policy, cfg.tau_metric)
        kept |= cluster_kept
        report.cluster_sizes.append(len(cluster_ids))
        report.removed_per_cluster.append(len(cluster_ids) - len(cluster_kept))
    report.kept_items = len(kept)
    return kept, model, report


def _check_coverage(needed: set[str], available: Sequence[str], what: str) -> None:
    missing = needed.difference(available)
    if missing:
        preview = ", ".join(sorted(missing)[:20])
        more = "" if len(missing) <= 20 else f" (+{len(missing) - 20} more)"
        raise ValueError(f"missing {what} embeddings for: {preview}{more}")


def semdedup_corpus(
    manifest: CorpusManifest,
    ids: Sequence[str],
    X: np.ndarray,
    cfg: SemDedupConfig,
    out_dir: str | Path,
    tokenizer: Tokenizer,
    stage_name: str = "semdedup",
    artifacts_dir: str | Path | None = None,
) -> tuple[CorpusManifest, SemDedupReport]:
    """Apply semantic dedup to a corpus given its (document or chunk) vectors.

    Document level keeps surviving documents. Chunk level keeps a document when
    at least one of its chunks survives, or emits surviving chunks themselves
    as documents when the config says so.
    """
    corpus_ids = [doc.id for doc in read_manifest_docs(manifest)]
    if cfg.level == LEVEL_DOCUMENT:
        _check_coverage(set(corpus_ids), ids, "document")
    else:
        covered = {parse_chunk_id(i)[0] for i in ids}
        nonempty = {doc.id for doc in read_manifest_docs(manifest) if doc.text.split()}
        _check_coverage(nonempty, covered, "chunk")

    kept, model, report = dedup_embeddings(ids, X, cfg)
    report.docs_in = len(corpus_ids)

    if artifacts_dir is not None:
        _write_artifacts(Path(artifacts_dir), model, kept, report)

    if cfg.level == LEVEL_DOCUMENT:
        def survivors() -> Iterator[Document]:
            for doc in read_manifest_docs(manifest):
                if doc.id in kept:
                    report.docs_kept += 1
                    yield doc
    elif cfg.emit_chunks_as_docs:
        def survivors() -> Iterator[Document]:
            for doc in read_manifest_docs(manifest):
                emitted = False
                for c in chunk_document(doc, tokenizer):
                    cid = chunk_vector_id(c.doc_id, c.index)
                    if cid in kept:
                        emitted = True
                        yield Document(id=cid, text=c.text, meta=dict(doc.meta))
                if emitted:
                    report.docs_kept += 1
    else:
        kept_docs = {parse_chunk_id(cid)[0] for cid in kept}

        def survivors() -> Iterator[Document]:
            for doc in read_manifest_docs(manifest):
                if doc.id in kept_docs:
                    report.docs_kept += 1
                    yield doc

    out = write_shards(
        survivors(),
        out_dir,
        tokenizer=tokenizer,
        provenance=[*manifest.provenance, stage_name],
    )
    return out, report


def _write_artifacts(artifacts_dir: Path, model: KMeansModel, kept: set[str], report: SemDedupReport) -> None:
    artifacts_dir.mkdir(parents=True, exist_ok=True)
    np.save(artifacts_dir / "centroids.npy", model.centroids)
    with open(artifacts_dir / "cluster_map.jsonl", "w", encoding="utf-8") as fh:
        for item_id in sorted(model.assignments):
            fh.write(json.dumps({"id": item_id, "cluster": model.assignments[item_id]}, ensure_ascii=False))
            fh.write("\n")
    with open(artifacts_dir / "kept_ids.txt", "w", encoding="utf-8") as fh:
        for item_id in sorted(kept):
            fh.write(json.dumps(item_id, ensure_ascii=False))
            fh.write("\n")
    payload = {
        "level": report.level,
        "n_clusters": report.n_clusters,
        "items": report.items,
        "kept_items": report.kept_items,
        "cluster_sizes": report.cluster_sizes,
        "removed_per_cluster": report.removed_per_cluster,
    }
    (artifacts_dir / "report.json").write_text(json.dumps(payload, sort_keys=True, indent=2), encoding="utf-8")


# ---------------------------------------------------------------------------
# Prototype pruning (recluster, keep the farthest fraction per cluster)

@dataclass
class D4Report:
    docs_in: int = 0
    docs_kept: int = 0
    n_clusters: int = 0

    @property
    def removal_fraction(self) -> float:
        return 0.0 if self.docs_in == 0 else 1.0 - self.docs_kept / self.docs_in


def prototype_prune_ids(ids: Sequence[str], X: np.ndarray, cfg: D4Config) -> tuple[set[str], KMeansModel]:
    """Keep, per fresh cluster, the ceil(r_proto * size) members farthest
    from the centroid (ties by id); ceil guarantees no cluster empties."""
    X = normalize_rows(X)
    k = min(cfg.recluster_k, len(ids))
    model = kmeans_fit(ids, X, k, seed=cfg.seed, max_iters=cfg.max_iters, tol=cfg.tol)

    id_list = list(ids)
    labels = np.array([model.assignments[i] for i in id_list])
    kept: set[str] = set()
    for j in range(k):
        mask = labels == j
        if not mask.any():
            continue
        cluster_ids = [i for i, m in zip(id_list, mask) if m]
        dists = np.sqrt(np.maximum(np.sum((X[mask] - model.centroids[j]) ** 2, axis=1), 0.0))
        order = sorted(zip(cluster_ids, dists), key=lambda t: (-t[1], t[0]))
        keep_n = math.ceil(cfg.r_proto * len(order))
        kept.update(member_id for member_id, _ in order[:keep_n])
    return kept, model


def d4_prune(
    manifest: CorpusManifest,
    ids: Sequence[str],
    X: np.ndarray,
    cfg: D4Config,
    out_dir: str | Path,
    tokenizer: Tokenizer,
    stage_name: str = "d4",
) -> tuple[CorpusManifest, D4Report]:
    """Prototype-prune an already-deduplicated corpus."""
    corpus_ids = [doc.id for doc in read_manifest_docs(manifest)]
    _check_coverage(set(corpus_ids), ids, "document")

    # Restrict to vectors of documents still present in the manifest.
    id_set = set(corpus_ids)
    keep_rows = [n for n, i in enumerate(ids) if i in id_set]
    sub_ids = [ids[n] for n in keep_rows]
    sub_X = np.asarray(X)[keep_rows]

    kept, model = prototype_prune_ids(sub_ids, sub_X, cfg)
    report = D4Report(docs_in=len(corpus_ids), n_clusters=model.k)

    def survivors() -> Iterator[Document]:
        for doc in read_manifest_docs(manifest):
            if doc.id in kept:
                report.docs_kept += 1
                yield doc

    out = write_shards(
        survivors(),
        out_dir,
        tokenizer=tokenizer,
        provenance=[*manifest.provenance, stage_name],
    )
    return out, report
