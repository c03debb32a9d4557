from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from corpusforge.corpus import CorpusManifest, Document, save_manifest, write_shards
from corpusforge.tokenizers import WhitespaceTokenizer


@pytest.fixture
def tokenizer():
    return WhitespaceTokenizer()


def random_words(rng: np.random.Generator, n: int, vocab: int = 4000) -> list[str]:
    return [f"w{int(i):04d}" for i in rng.integers(0, vocab, size=n)]


def make_docs(n: int, seed: int = 0, words_per_doc: int = 40, prefix: str = "doc", vocab: int = 4000) -> list[Document]:
    rng = np.random.default_rng(seed)
    return [
        Document(id=f"{prefix}-{i:05d}", text=" ".join(random_words(rng, words_per_doc, vocab)))
        for i in range(n)
    ]


def write_corpus(docs, directory: Path, max_per_shard: int = 10_000, provenance=("ingest",)):
    tokenizer = WhitespaceTokenizer()
    manifest = write_shards(docs, directory, max_per_shard=max_per_shard,
                            tokenizer=tokenizer, provenance=list(provenance))
    manifest_path = directory / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest, manifest_path


@dataclass
class PlantedCorpus:
    """2,000 docs: 1,000 originals, 500 lexical near-copies, 500 paraphrases.

    Copies duplicate originals 0..499 (half verbatim, half with one appended
    word, so shingle overlap stays >= 0.99). Paraphrases shuffle the words of
    originals 500..999: the bag of words (hence the hashing-embedder vector)
    is identical while the 5-gram shingles are disjoint.
    """

    docs: list[Document]
    copy_pairs: list[tuple[str, str]]  # (original id, copy id)
    paraphrase_pairs: list[tuple[str, str]]  # (original id, paraphrase id)


def build_planted_corpus(
    seed: int = 7,
    n_base: int = 1000,
    n_copies: int = 500,
    n_paraphrases: int = 500,
    words_per_doc: int = 150,
) -> PlantedCorpus:
    rng = np.random.default_rng(seed)
    base = [
        Document(id=f"base-{i:04d}", text=" ".join(random_words(rng, words_per_doc)))
        for i in range(n_base)
    ]

    docs = list(base)
    copy_pairs = []
    for i in range(n_copies):
        original = base[i]
        text = original.text if i % 2 == 0 else original.text + " extraword"
        copy_id = f"copy-{i:04d}"
        docs.append(Document(id=copy_id, text=text))
        copy_pairs.append((original.id, copy_id))

    paraphrase_pairs = []
    for j in range(n_paraphrases):
        original = base[n_base - n_paraphrases + j]
        words = original.text.split()
        order = rng.permutation(len(words))
        para_id = f"para-{j:04d}"
        docs.append(Document(id=para_id, text=" ".join(words[k] for k in order)))
        paraphrase_pairs.append((original.id, para_id))

    return PlantedCorpus(docs=docs, copy_pairs=copy_pairs, paraphrase_pairs=paraphrase_pairs)
