"""Document and chunk embeddings behind a pluggable encoder.

Documents are tiled into fixed-size token chunks, each chunk is encoded, and
chunk vectors are mean-pooled then re-normalized into one unit vector per
document. Two encoders share the same interface: a hashing test embedder that
needs no model or network, and a client for a remote encoder service speaking
the `/embed` + `/health` wire protocol. Corpus embedding checkpoints progress
on disk so an interrupted run resumes instead of restarting.
"""

from __future__ import annotations

import json
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Protocol, Sequence

import numpy as np
import requests

from .corpus import CorpusManifest, Document, read_manifest_docs
from .hashing import stable_hash64
from .tokenizers import Tokenizer

VECTOR_MAGIC = b"CFVS"
VECTOR_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")  # magic, version, dim, count

DEFAULT_CHUNK_TOKENS = 512

KIND_TEST = "deterministic-test"
KIND_REMOTE = "remote-service"


class EmbeddingError(Exception):
    """Non-retryable embedding failure (bad response, dimension mismatch)."""


class EmbedderUnavailableError(EmbeddingError):
    """Remote endpoint unreachable after retries; the stage is resumable."""


@dataclass
class Chunk:
    doc_id: str
    index: int
    text: str
    token_start: int
    token_end: int


@dataclass
class EmbeddingVector:
    id: str
    values: np.ndarray


@dataclass(frozen=True)
class EmbedderSpec:
    kind: str = KIND_TEST
    dim: int = 64
    endpoint: str = ""
    batch_size: int = 32
    hash_seed: int = 0

    def __post_init__(self):
        if self.kind not in (KIND_TEST, KIND_REMOTE):
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        if self.kind == KIND_REMOTE and not self.endpoint:
            raise ValueError("remote embedder needs an endpoint")
        if self.dim < 1 or self.batch_size < 1:
            raise ValueError("dim and batch_size must be >= 1")

    def to_config(self) -> dict:
        return {
            "kind": self.kind,
            "dim": self.dim,
            "endpoint": self.endpoint,
            "batch_size": self.batch_size,
            "hash_seed": self.hash_seed,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "EmbedderSpec":
        return cls(
            kind=cfg.get("kind", KIND_TEST),
            dim=int(cfg.get("dim", 64)),
            endpoint=cfg.get("endpoint", ""),
            batch_size=int(cfg.get("batch_size", 32)),
            hash_seed=int(cfg.get("hash_seed", 0)),
        )


class Embedder(Protocol):
    spec: EmbedderSpec

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=-1, keepdims=True)
    norms = np.where(norms == 0.0, 1.0, norms)
    return matrix / norms


class HashingEmbedder:
    """Deterministic test embedder: token counts hashed into dim buckets.

    A fixed per-position jitter derived from the seed keeps vectors off the
    lattice axes; the result is L2-normalized. Same spec + same text always
    produces the same vector, with no model download and no service.
    """

    JITTER_SCALE = 1e-3

    def __init__(self, spec: EmbedderSpec):
        self.spec = spec
        self._jitter = np.array(
            [
                (stable_hash64(f"jitter:{i}", seed=spec.hash_seed) % (1 << 20)) / float(1 << 20)
                for i in range(spec.dim)
            ],
            dtype=np.float64,
        ) * self.JITTER_SCALE

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.spec.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            counts = np.zeros(self.spec.dim, dtype=np.float64)
            for token in text.split():
                counts[stable_hash64(token, seed=self.spec.hash_seed) % self.spec.dim] += 1.0
            out[row] = counts + self._jitter
        return normalize_rows(out)


class RemoteEmbedder:
    """Client for a remote encoder service.

    POST {endpoint}/embed with {"texts": [...]} -> {"vectors": [...], "dim": d}.
    Transient failures (connection errors, 5xx) retry with exponential
    backoff; exhausting retries raises EmbedderUnavailableError so the caller
    can stop with its checkpoint intact. Returned vectors are re-normalized on
    receipt, making the server's own normalization a checked no-op.
    """

    def __init__(
        self,
        spec: EmbedderSpec,
        max_retries: int = 5,
        backoff_seconds: float = 0.5,
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ):
        self.spec = spec
        self.max_retries = max_retries
        self.backoff_seconds = backoff_seconds
        self.timeout = timeout
        self._session = session or requests.Session()

    def health(self) -> dict:
        resp = self._session.get(f"{self.spec.endpoint}/health", timeout=self.timeout)
        resp.raise_for_status()
        return resp.json()

    def _post(self, texts: Sequence[str]) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff_seconds * (2 ** (attempt - 1)))
            try:
                resp = self._session.post(
                    f"{self.spec.endpoint}/embed",
                    json={"texts": list(texts)},
                    timeout=self.timeout,
                )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = exc
                continue
            if resp.status_code >= 500:
                last_error = EmbeddingError(f"server error {resp.status_code}: {resp.text[:200]}")
                continue
            if resp.status_code != 200:
                raise EmbeddingError(f"embed request rejected ({resp.status_code}): {resp.text[:200]}")
            return resp.json()
        raise EmbedderUnavailableError(
            f"{self.spec.endpoint} unreachable after {self.max_retries} retries: {last_error}"
        )

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        payload = self._post(texts)
        vectors = np.asarray(payload.get("vectors"), dtype=np.float64)
        dim = int(payload.get("dim", -1))
        if vectors.ndim != 2 or vectors.shape[0] != len(texts):
            raise EmbeddingError(
                f"expected {len(texts)} vectors, got shape {vectors.shape}"
            )
        if dim != self.spec.dim or vectors.shape[1] != self.spec.dim:
            raise EmbeddingError(
                f"dimension mismatch: spec {self.spec.dim}, server dim {dim}, rows {vectors.shape[1]}"
            )
        return normalize_rows(vectors)


def create_embedder(spec: EmbedderSpec, **remote_kwargs) -> Embedder:
    if spec.kind == KIND_TEST:
        return HashingEmbedder(spec)
    return RemoteEmbedder(spec, **remote_kwargs)


# ---------------------------------------------------------------------------
# Chunking and pooling

def chunk_document(doc: Document, tokenizer: Tokenizer, max_tokens: int = DEFAULT_CHUNK_TOKENS) -> list[Chunk]:
    """Greedy left-to-right tiling into consecutive spans of <= max_tokens."""
    if max_tokens < 1:
        raise ValueError(f"max_tokens must be >= 1, got {max_tokens}")
    tokens = tokenizer.tokenize(doc.text)
    chunks = []
    for index, start in enumerate(range(0, len(tokens), max_tokens)):
        end = min(start + max_tokens, len(tokens))
        chunks.append(Chunk(doc.id, index, " ".join(tokens[start:end]), start, end))
    return chunks


def chunk_vector_id(doc_id: str, index: int) -> str:
    return f"{doc_id}::{index}"


def parse_chunk_id(chunk_id: str) -> tuple[str, int]:
    doc_id, _, index = chunk_id.rpartition("::")
    return doc_id, int(index)


def embed_chunks(chunks: Sequence[Chunk], embedder: Embedder) -> list[EmbeddingVector]:
    """One unit vector per chunk, requested in batches, in input order."""
    batch_size = embedder.spec.batch_size
    out: list[EmbeddingVector] = []
    for start in range(0, len(chunks), batch_size):
        batch = chunks[start : start + batch_size]
        vectors = embedder.embed([c.text for c in batch])
        out.extend(
            EmbeddingVector(chunk_vector_id(c.doc_id, c.index), v)
            for c, v in zip(batch, vectors)
        )
    return out


def pool_chunk_vectors(vectors: np.ndarray) -> np.ndarray:
    """Mean of chunk vectors, re-normalized to unit length."""
    return normalize_rows(np.asarray(vectors, dtype=np.float64).mean(axis=0))


def embed_document(
    doc: Document,
    embedder: Embedder,
    tokenizer: Tokenizer,
    max_tokens: int = DEFAULT_CHUNK_TOKENS,
) -> EmbeddingVector | None:
    """Document vector, or None for empty documents (caller counts the skip)."""
    chunks = chunk_document(doc, tokenizer, max_tokens)
    if not chunks:
        return None
    chunk_vectors = embed_chunks(chunks, embedder)
    matrix = np.stack([cv.values for cv in chunk_vectors])
    return EmbeddingVector(doc.id, pool_chunk_vectors(matrix))


# ---------------------------------------------------------------------------
# Vector shards: header + little-endian float32 rows + sidecar id index

class VectorShardWriter:
    def __init__(self, path: str | Path, dim: int, append: bool = False):
        self.path = Path(path)
        self.ids_path = Path(str(path) + ".ids")
        self.dim = dim
        mode = "r+b" if append and self.path.exists() else "w+b"
        self._fh = open(self.path, mode)
        self._ids_fh = open(self.ids_path, "a" if append else "w", encoding="utf-8")
        if mode == "w+b":
            self._fh.write(_HEADER.pack(VECTOR_MAGIC, VECTOR_VERSION, dim, 0))
            self.count = 0
        else:
            magic, version, file_dim, count = _HEADER.unpack(self._fh.read(_HEADER.size))
            if magic != VECTOR_MAGIC or version != VECTOR_VERSION or file_dim != dim:
                raise ValueError(f"{path}: incompatible vector shard header")
            self.count = count
            self._fh.seek(0, os.SEEK_END)

    def write(self, vector_id: str, values: np.ndarray) -> None:
        row = np.asarray(values, dtype="<f4")
        if row.shape != (self.dim,):
            raise ValueError(f"vector shape {row.shape} != ({self.dim},)")
        self._fh.write(row.tobytes())
        self._ids_fh.write(json.dumps(vector_id, ensure_ascii=False))
        self._ids_fh.write("\n")
        self.count += 1

    def data_bytes(self) -> int:
        self._fh.flush()
        return self._fh.tell()

    def ids_bytes(self) -> int:
        self._ids_fh.flush()
        return self._ids_fh.tell()

    def truncate_to(self, data_bytes: int, ids_bytes: int, count: int) -> None:
        self._fh.truncate(data_bytes)
        self._fh.seek(data_bytes)
        self._ids_fh.truncate(ids_bytes)
        self.count = count

    def flush(self) -> None:
        self._fh.flush()
        self._ids_fh.flush()

    def close(self) -> None:
        self._fh.seek(0)
        self._fh.write(_HEADER.pack(VECTOR_MAGIC, VECTOR_VERSION, self.dim, self.count))
        self._fh.close()
        self._ids_fh.close()


def load_vectors(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Ids and the float32 matrix of a vector shard."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic, version, dim, count = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != VECTOR_MAGIC:
            raise ValueError(f"{path}: not a vector shard")
        if version != VECTOR_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        data = np.frombuffer(fh.read(count * dim * 4), dtype="<f4").reshape(count, dim)
    ids = []
    with open(str(path) + ".ids", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                ids.append(json.loads(line))
    if len(ids) != count:
        raise ValueError(f"{path}: id index has {len(ids)} entries for {count} vectors")
    return ids, data.copy()


# ---------------------------------------------------------------------------
# Corpus embedding with progress checkpoints

LEVEL_DOCUMENT = "document"
LEVEL_CHUNK = "chunk"


@dataclass
class EmbedStats:
    docs: int = 0
    chunks: int = 0
    vectors: int = 0
    skipped_empty: int = 0
    resumed_docs: int = 0


@dataclass
class _DocGroup:
    docs: list[tuple[Document, list[Chunk]]] = field(default_factory=list)

    @property
    def chunks(self) -> list[Chunk]:
        return [c for _, doc_chunks in self.docs for c in doc_chunks]


def _progress_path(out_path: Path) -> Path:
    return Path(str(out_path) + ".progress")


def _save_progress(path: Path, docs_done: int, count: int, data_bytes: int, ids_bytes: int) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(
        json.dumps(
            {"docs_done": docs_done, "count": count, "data_bytes": data_bytes, "ids_bytes": ids_bytes},
            sort_keys=True,
        ),
        encoding="utf-8",
    )
    os.replace(tmp, path)


def embed_corpus(
    manifest: CorpusManifest,
    spec: EmbedderSpec,
    tokenizer: Tokenizer,
    out_path: str | Path,
    level: str = LEVEL_DOCUMENT,
    max_tokens: int = DEFAULT_CHUNK_TOKENS,
    workers: int = 1,
    group_docs: int = 64,
    embedder: Embedder | None = None,
) -> EmbedStats:
    """Embed every document (or chunk) of a corpus into a vector shard.

    Work proceeds in document groups; after each group the shard and a
    progress file are flushed, so a killed or failed run resumes from the last
    completed group instead of re-embedding from zero. Batches within a group
    are dispatched to ``workers`` concurrent requests with results kept in
    submission order, which makes output independent of arrival order.
    """
    if level not in (LEVEL_DOCUMENT, LEVEL_CHUNK):
        raise ValueError(f"unknown embedding level {level!r}")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    embedder = embedder or create_embedder(spec)
    stats = EmbedStats()

    progress_file = _progress_path(out_path)
    resume_docs = 0
    if progress_file.exists() and out_path.exists():
        saved = json.loads(progress_file.read_text(encoding="utf-8"))
        resume_docs = int(saved["docs_done"])
        writer = VectorShardWriter(out_path, spec.dim, append=True)
        writer.truncate_to(int(saved["data_bytes"]), int(saved["ids_bytes"]), int(saved["count"]))
        stats.resumed_docs = resume_docs
    else:
        writer = VectorShardWriter(out_path, spec.dim)

    def flush_group(group: _DocGroup) -> None:
        texts = [c.text for c in group.chunks]
        batches = [
            texts[i : i + spec.batch_size] for i in range(0, len(texts), spec.batch_size)
        ]
        if workers > 1 and len(batches) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(embedder.embed, batches))
        else:
            results = [embedder.embed(b) for b in batches]
        vectors = np.concatenate(results, axis=0) if results else np.empty((0, spec.dim))

        offset = 0
        for doc, doc_chunks in group.docs:
            doc_vectors = vectors[offset : offset + len(doc_chunks)]
            offset += len(doc_chunks)
            if level == LEVEL_DOCUMENT:
                writer.write(doc.id, pool_chunk_vectors(doc_vectors))
                stats.vectors += 1
            else:
                for c, v in zip(doc_chunks, doc_vectors):
                    writer.write(chunk_vector_id(c.doc_id, c.index), v)
                    stats.vectors += 1
        writer.flush()
        _save_progress(progress_file, stats.docs, writer.count, writer.data_bytes(), writer.ids_bytes())

    group = _DocGroup()
    try:
        for doc in read_manifest_docs(manifest):
            stats.docs += 1
            if stats.docs <= resume_docs:
                continue
            chunks = chunk_document(doc, tokenizer, max_tokens)
            if not chunks:
                stats.skipped_empty += 1
                continue
            stats.chunks += len(chunks)
            group.docs.append((doc, chunks))
            if len(group.docs) >= group_docs:
                flush_group(group)
                group = _DocGroup()
        if group.docs:
            flush_group(group)
    finally:
        writer.close()

    progress_file.unlink(missing_ok=True)
    return stats
