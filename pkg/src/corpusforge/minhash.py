"""Lexical near-duplicate removal with MinHash signatures and LSH banding.

Four stages, each with an on-disk artifact so runs can resume: signature
computation, band bucketing (sort-by-key with spill-to-disk runs), candidate
pair clustering via union-find, and keep-one-per-cluster filtering.
"""

from __future__ import annotations

import heapq
import os
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .corpus import CorpusManifest, Document, read_manifest_docs, write_shards
from .hashing import UniversalHashFamily, stable_hash64
from .tokenizers import Tokenizer
from .union_find import UnionFind

SIGNATURE_MAGIC = b"CFSG"
PAIRS_MAGIC = b"CFPR"
CLUSTERS_MAGIC = b"CFCM"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class MinHashParams:
    bands: int = 20
    rows_per_band: int = 20
    shingle_size: int = 5
    hash_seed: int = 0

    def __post_init__(self):
        if self.bands < 1 or self.rows_per_band < 1:
            raise ValueError("bands and rows_per_band must be >= 1")
        if self.shingle_size < 1:
            raise ValueError("shingle_size must be >= 1")

    @property
    def num_hashes(self) -> int:
        return self.bands * self.rows_per_band

    def key(self) -> tuple:
        return (self.bands, self.rows_per_band, self.shingle_size, self.hash_seed)


@dataclass
class MinHashSignature:
    doc_id: str
    values: np.ndarray  # (bands, rows_per_band) uint64
    params_key: tuple


def shingle(text: str, n: int) -> set[int]:
    """Hashes of lowercased, whitespace-normalized word n-grams.

    Texts with fewer than n words fall back to the single hash of the whole
    normalized text so short documents still dedupe exactly.
    """
    if n < 1:
        raise ValueError(f"shingle size must be >= 1, got {n}")
    words = text.lower().split()
    if len(words) < n:
        return {stable_hash64(" ".join(words))}
    return {stable_hash64(" ".join(words[i : i + n])) for i in range(len(words) - n + 1)}


@lru_cache(maxsize=8)
def _family(num_hashes: int, seed: int) -> UniversalHashFamily:
    return UniversalHashFamily(num_hashes, seed)


def signature(shingles: set[int] | Sequence[int], params: MinHashParams) -> np.ndarray:
    """Per-hash-function minima over the shingle set, shaped (bands, rows)."""
    values = np.fromiter(shingles, dtype=np.uint64, count=len(shingles))
    if values.size == 0:
        raise ValueError("cannot sign an empty shingle set; apply the short-doc fallback first")
    minima = _family(params.num_hashes, params.hash_seed).min_over(values)
    return minima.reshape(params.bands, params.rows_per_band)


def sign_document(doc_id: str, text: str, params: MinHashParams) -> MinHashSignature:
    return MinHashSignature(doc_id, signature(shingle(text, params.shingle_size), params), params.key())


def estimate_jaccard(a: MinHashSignature, b: MinHashSignature) -> float:
    """Fraction of matching signature components; unbiased Jaccard estimate."""
    if a.params_key != b.params_key:
        raise ValueError(f"signature params differ: {a.params_key} vs {b.params_key}")
    return float(np.mean(a.values == b.values))


def bucket_keys(sig: MinHashSignature) -> list[int]:
    """One stable key per band; two docs collide in a band iff its rows match."""
    keys = []
    for j in range(sig.values.shape[0]):
        band = np.ascontiguousarray(sig.values[j])
        keys.append(stable_hash64(struct.pack("<I", j) + band.tobytes()))
    return keys


class DuplicateClusters:
    """Connected components of the candidate-pair graph."""

    def __init__(self):
        self._uf = UnionFind()

    def add_pair(self, a: str, b: str) -> None:
        self._uf.union(a, b)

    def clusters(self) -> list[list[str]]:
        """Non-singleton clusters, each sorted by id, ordered by smallest id."""
        groups = [members for members in self._uf.components().values() if len(members) > 1]
        groups.sort(key=lambda members: members[0])
        return groups

    def removal_set(self) -> set[str]:
        """Every clustered id except the smallest per cluster."""
        doomed: set[str] = set()
        for members in self.clusters():
            doomed.update(members[1:])
        return doomed


def cluster(pairs: Iterable[tuple[str, str]]) -> DuplicateClusters:
    out = DuplicateClusters()
    for a, b in pairs:
        out.add_pair(a, b)
    return out


# ---------------------------------------------------------------------------
# Signature shard files (versioned binary, magic header)

def _write_header(fh: IO[bytes], magic: bytes, extra: bytes = b"") -> None:
    fh.write(magic)
    fh.write(struct.pack("<I", FORMAT_VERSION))
    fh.write(extra)


def _check_header(fh: IO[bytes], magic: bytes, path) -> None:
    got = fh.read(4)
    if got != magic:
        raise ValueError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")


def _write_str(fh: IO[bytes], s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh: IO[bytes]) -> str | None:
    head = fh.read(4)
    if not head:
        return None
    (n,) = struct.unpack("<I", head)
    return fh.read(n).decode("utf-8")


class SignatureWriter:
    def __init__(self, path: str | Path, params: MinHashParams):
        self.path = Path(path)
        self.params = params
        self._fh = open(self.path, "wb")
        _write_header(
            self._fh,
            SIGNATURE_MAGIC,
            struct.pack("<IIIq", params.bands, params.rows_per_band, params.shingle_size, params.hash_seed),
        )
        self.count = 0

    def write(self, sig: MinHashSignature) -> None:
        _write_str(self._fh, sig.doc_id)
        self._fh.write(np.ascontiguousarray(sig.values, dtype=np.uint64).tobytes())
        self.count += 1

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_signatures(path: str | Path) -> Iterator[MinHashSignature]:
    path = Path(path)
    with open(path, "rb") as fh:
        _check_header(fh, SIGNATURE_MAGIC, path)
        bands, rows, shingle_size, seed = struct.unpack("<IIIq", fh.read(20))
        params = MinHashParams(bands, rows, shingle_size, seed)
        n_bytes = params.num_hashes * 8
        while True:
            doc_id = _read_str(fh)
            if doc_id is None:
                return
            raw = fh.read(n_bytes)
            values = np.frombuffer(raw, dtype=np.uint64).reshape(bands, rows).copy()
            yield MinHashSignature(doc_id, values, params.key())


def write_pairs(path: str | Path, pairs: Iterable[tuple[str, str]]) -> int:
    count = 0
    with open(path, "wb") as fh:
        _write_header(fh, PAIRS_MAGIC)
        for a, b in pairs:
            _write_str(fh, a)
            _write_str(fh, b)
            count += 1
    return count


def read_pairs(path: str | Path) -> Iterator[tuple[str, str]]:
    path = Path(path)
    with open(path, "rb") as fh:
        _check_header(fh, PAIRS_MAGIC, path)
        while True:
            a = _read_str(fh)
            if a is None:
                return
            b = _read_str(fh)
            yield a, b


def write_cluster_map(path: str | Path, clusters: DuplicateClusters) -> int:
    count = 0
    with open(path, "wb") as fh:
        _write_header(fh, CLUSTERS_MAGIC)
        for members in clusters.clusters():
            root = members[0]
            for member in members:
                _write_str(fh, member)
                _write_str(fh, root)
                count += 1
    return count


def read_cluster_map(path: str | Path) -> DuplicateClusters:
    path = Path(path)
    out = DuplicateClusters()
    with open(path, "rb") as fh:
        _check_header(fh, CLUSTERS_MAGIC, path)
        while True:
            member = _read_str(fh)
            if member is None:
                return out
            root = _read_str(fh)
            out.add_pair(member, root)


# ---------------------------------------------------------------------------
# Banding: sort-by-key candidate pair generation with spill-to-disk runs

class _RunSorter:
    """External sort of (key, id) rows: sorted runs on disk, heap merge."""

    def __init__(self, tmp_dir: str | Path, max_buffered: int = 1_000_000):
        self.tmp_dir = Path(tmp_dir)
        self.max_buffered = max(1, max_buffered)
        self._buffer: list[tuple[bytes, str]] = []
        self._runs: list[Path] = []

    def add(self, key: int, doc_id: str) -> None:
        # Big-endian so byte order equals numeric order during the merge.
        self._buffer.append((struct.pack(">Q", key), doc_id))
        if len(self._buffer) >= self.max_buffered:
            self._spill()

    def _spill(self) -> None:
        if not self._buffer:
            return
        self._buffer.sort()
        fd, name = tempfile.mkstemp(prefix="bandrun-", dir=self.tmp_dir)
        with os.fdopen(fd, "wb") as fh:
            for key, doc_id in self._buffer:
                fh.write(key)
                _write_str(fh, doc_id)
        self._runs.append(Path(name))
        self._buffer = []

    @staticmethod
    def _read_run(path: Path) -> Iterator[tuple[bytes, str]]:
        with open(path, "rb") as fh:
            while True:
                key = fh.read(8)
                if not key:
                    return
                yield key, _read_str(fh)

    def sorted_rows(self) -> Iterator[tuple[bytes, str]]:
        self._spill()
        readers = [self._read_run(p) for p in self._runs]
        try:
            yield from heapq.merge(*readers)
        finally:
            for p in self._runs:
                p.unlink(missing_ok=True)


def generate_candidate_pairs(
    signatures: Iterable[MinHashSignature],
    tmp_dir: str | Path,
    max_buffered: int = 1_000_000,
) -> Iterator[tuple[str, str]]:
    """Pairs of docs sharing at least one full band.

    Docs in the same bucket are linked to the bucket's first id, which keeps
    pair volume linear in bucket size while preserving connectivity.
    """
    sorter = _RunSorter(tmp_dir, max_buffered=max_buffered)
    for sig in signatures:
        for key in bucket_keys(sig):
            sorter.add(key, sig.doc_id)

    current_key: bytes | None = None
    first_id: str | None = None
    for key, doc_id in sorter.sorted_rows():
        if key != current_key:
            current_key, first_id = key, doc_id
            continue
        if doc_id != first_id:
            yield first_id, doc_id


# ---------------------------------------------------------------------------
# Full stage pipeline

@dataclass
class MinHashStats:
    docs: int = 0
    pairs: int = 0
    clusters: int = 0
    removed: int = 0
    cluster_sizes: dict[int, int] = field(default_factory=dict)


def compute_signatures(
    docs: Iterable[Document],
    params: MinHashParams,
    workers: int = 1,
) -> Iterator[MinHashSignature]:
    """Signatures in document order; chunks fan out to threads when workers > 1."""
    if workers <= 1:
        for doc in docs:
            yield sign_document(doc.id, doc.text, params)
        return

    def job(batch: list[Document]) -> list[MinHashSignature]:
        return [sign_document(d.id, d.text, params) for d in batch]

    def batches() -> Iterator[list[Document]]:
        batch: list[Document] = []
        for doc in docs:
            batch.append(doc)
            if len(batch) >= 256:
                yield batch
                batch = []
        if batch:
            yield batch

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for signed in pool.map(job, batches()):
            yield from signed


def filter_duplicates(
    clusters: DuplicateClusters,
    manifest: CorpusManifest,
    out_dir: str | Path,
    tokenizer: Tokenizer | None = None,
    stage_name: str = "minhash-filter",
) -> tuple[CorpusManifest, MinHashStats]:
    """Keep one document per cluster (smallest id); singletons always survive."""
    doomed = clusters.removal_set()
    stats = MinHashStats(clusters=len(clusters.clusters()))
    stats.cluster_sizes = {}
    for members in clusters.clusters():
        stats.cluster_sizes[len(members)] = stats.cluster_sizes.get(len(members), 0) + 1

    def survivors() -> Iterator[Document]:
        for doc in read_manifest_docs(manifest):
            stats.docs += 1
            if doc.id in doomed:
                stats.removed += 1
                continue
            yield doc

    out = write_shards(
        survivors(),
        out_dir,
        tokenizer=tokenizer,
        provenance=[*manifest.provenance, stage_name],
    )
    return out, stats


def minhash_dedup(
    manifest: CorpusManifest,
    params: MinHashParams,
    work_dir: str | Path,
    out_dir: str | Path,
    tokenizer: Tokenizer | None = None,
    workers: int = 1,
    max_buffered: int = 1_000_000,
    stage_name: str = "minhash-filter",
) -> tuple[CorpusManifest, MinHashStats]:
    """Run sign -> bucket -> cluster -> filter, leaving stage artifacts in work_dir."""
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)

    sig_path = work_dir / "signatures.bin"
    with SignatureWriter(sig_path, params) as writer:
        for sig in compute_signatures(read_manifest_docs(manifest), params, workers=workers):
            writer.write(sig)

    pairs_path = work_dir / "pairs.bin"
    n_pairs = write_pairs(
        pairs_path,
        generate_candidate_pairs(read_signatures(sig_path), work_dir, max_buffered=max_buffered),
    )

    dup_clusters = cluster(read_pairs(pairs_path))
    write_cluster_map(work_dir / "clusters.bin", dup_clusters)

    out, stats = filter_duplicates(dup_clusters, manifest, out_dir, tokenizer=tokenizer, stage_name=stage_name)
    stats.pairs = n_pairs
    return out, stats
