"""Sharded corpus I/O: newline-delimited record shards, manifests, token counts.

Shards are plain or gzip-compressed files with one JSON document per line
(fields ``id``, ``text``, and optionally ``meta`` and ``token_count``).
A manifest records the shard list, per-shard counts, totals, and the ordered
provenance of pipeline stages that produced the corpus.
"""

from __future__ import annotations

import gzip
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator

from .tokenizers import Tokenizer

MANIFEST_VERSION = 1


@dataclass
class Document:
    id: str
    text: str
    meta: dict[str, str] = field(default_factory=dict)
    token_count: int | None = None


@dataclass
class ReadStats:
    records: int = 0
    skipped: int = 0


@dataclass
class CorpusManifest:
    shards: list[str]
    shard_counts: list[int]
    doc_count: int
    token_count: int
    provenance: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if self.doc_count != sum(self.shard_counts):
            raise ValueError(
                f"manifest doc_count {self.doc_count} != sum of shard counts "
                f"{sum(self.shard_counts)}"
            )
        if len(self.shards) != len(self.shard_counts):
            raise ValueError("manifest shards and shard_counts length mismatch")


def count_tokens(doc: Document, tokenizer: Tokenizer) -> int:
    """Token count of a document, cached on the document once computed."""
    if doc.token_count is None:
        doc.token_count = tokenizer.count(doc.text)
    return doc.token_count


def _open_text(path: str | Path, mode: str) -> IO[str]:
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def _parse_record(line: str) -> Document | None:
    try:
        raw = json.loads(line)
    except json.JSONDecodeError:
        return None
    if not isinstance(raw, dict):
        return None
    doc_id = raw.get("id")
    text = raw.get("text")
    if not isinstance(doc_id, str) or not doc_id or not isinstance(text, str):
        return None
    meta = raw.get("meta") or {}
    if not isinstance(meta, dict):
        return None
    token_count = raw.get("token_count")
    if token_count is not None and (not isinstance(token_count, int) or token_count < 0):
        return None
    return Document(id=doc_id, text=text, meta={str(k): str(v) for k, v in meta.items()},
                    token_count=token_count)


def read_shards(paths: Iterable[str | Path], stats: ReadStats | None = None) -> Iterator[Document]:
    """Stream documents from shards in shard order, then record order.

    Missing shard files are fatal. Malformed records are skipped and counted
    in ``stats`` when one is passed.
    """
    for path in paths:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"shard not found: {path}")
        with _open_text(path, "r") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                doc = _parse_record(line)
                if doc is None:
                    if stats is not None:
                        stats.skipped += 1
                    continue
                if stats is not None:
                    stats.records += 1
                yield doc


def read_manifest_docs(manifest: CorpusManifest, stats: ReadStats | None = None) -> Iterator[Document]:
    return read_shards(manifest.shards, stats=stats)


def _record_line(doc: Document) -> str:
    rec = {"id": doc.id, "text": doc.text, "meta": doc.meta}
    if doc.token_count is not None:
        rec["token_count"] = doc.token_count
    return json.dumps(rec, ensure_ascii=False, sort_keys=True)


def write_shards(
    docs: Iterable[Document],
    out_dir: str | Path,
    max_per_shard: int = 100_000,
    compress: bool = False,
    tokenizer: Tokenizer | None = None,
    provenance: Iterable[str] = (),
) -> CorpusManifest:
    """Write a document stream to numbered shards and return its manifest.

    Shards never exceed ``max_per_shard`` records. When a tokenizer is given,
    missing token counts are filled before writing so manifest totals are
    complete. On any I/O failure the partially written shards are removed.
    """
    if max_per_shard < 1:
        raise ValueError(f"max_per_shard must be >= 1, got {max_per_shard}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = ".jsonl.gz" if compress else ".jsonl"

    shard_paths: list[Path] = []
    shard_counts: list[int] = []
    token_total = 0
    fh: IO[str] | None = None
    in_shard = 0
    try:
        for doc in docs:
            if fh is None or in_shard >= max_per_shard:
                if fh is not None:
                    fh.close()
                    shard_counts.append(in_shard)
                shard_path = out_dir / f"shard-{len(shard_paths):05d}{suffix}"
                fh = _open_text(shard_path, "w")
                shard_paths.append(shard_path)
                in_shard = 0
            if tokenizer is not None:
                count_tokens(doc, tokenizer)
            if doc.token_count is not None:
                token_total += doc.token_count
            fh.write(_record_line(doc))
            fh.write("\n")
            in_shard += 1
        if fh is not None:
            fh.close()
            shard_counts.append(in_shard)
    except Exception:
        if fh is not None:
            fh.close()
        for p in shard_paths:
            p.unlink(missing_ok=True)
        raise

    return CorpusManifest(
        shards=[str(p) for p in shard_paths],
        shard_counts=shard_counts,
        doc_count=sum(shard_counts),
        token_count=token_total,
        provenance=list(provenance),
    )


def save_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    """Persist a manifest as JSON, with shard paths relative to its directory.

    Relative paths (including ``..`` forms) keep manifest bytes identical when
    the same pipeline layout is produced under a different root.
    """
    manifest.validate()
    path = Path(path)
    base = path.parent.resolve()
    shards = []
    for shard in manifest.shards:
        shard_path = Path(shard).resolve()
        try:
            shards.append(os.path.relpath(shard_path, base))
        except ValueError:
            shards.append(str(shard_path))
    payload = {
        "version": MANIFEST_VERSION,
        "shards": shards,
        "shard_counts": manifest.shard_counts,
        "doc_count": manifest.doc_count,
        "token_count": manifest.token_count,
        "provenance": manifest.provenance,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def load_manifest(path: str | Path) -> CorpusManifest:
    path = Path(path)
    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version in {path}: {payload.get('version')!r}")
    base = path.parent.resolve()
    shards = []
    for shard in payload["shards"]:
        shard_path = Path(shard)
        shards.append(str(shard_path if shard_path.is_absolute() else base / shard_path))
    manifest = CorpusManifest(
        shards=shards,
        shard_counts=[int(c) for c in payload["shard_counts"]],
        doc_count=int(payload["doc_count"]),
        token_count=int(payload["token_count"]),
        provenance=[str(p) for p in payload["provenance"]],
    )
    manifest.validate()
    return manifest
