"""Linear bag-of-ngrams text classifier with hashed features.

Word n-grams are hashed into a fixed bucket table, the matching embedding
rows are averaged into a hidden vector, and a linear layer plus softmax
produces class probabilities. Training is plain per-example SGD with a
linearly decaying learning rate; it is kept single-threaded on purpose so a
(seed, data) pair always yields a bit-identical model. Scoring is stateless
and safe to fan out across workers.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .corpus import CorpusManifest, Document, count_tokens, read_manifest_docs, write_shards
from .hashing import stable_hash64
from .tokenizers import Tokenizer

POSITIVE_LABEL = "positive"
NEGATIVE_LABEL = "negative"

MODEL_MAGIC = b"CFLC"
MODEL_VERSION = 1

SCORE_META_KEY = "classifier_score"


@dataclass(frozen=True)
class NgramFeaturizer:
    """Hashes lowercased word n-grams into a fixed-size bucket table."""

    ngram_orders: tuple[int, ...] = (1, 2)
    bucket_count: int = 2_000_000
    hash_seed: int = 0

    def __post_init__(self):
        if not self.ngram_orders or any(n < 1 for n in self.ngram_orders):
            raise ValueError(f"ngram orders must be >= 1, got {self.ngram_orders}")
        if self.bucket_count < 1:
            raise ValueError(f"bucket_count must be >= 1, got {self.bucket_count}")

    def featurize(self, text: str) -> list[int]:
        """Feature indices (with repeats) for a text; empty text yields none."""
        words = text.lower().split()
        indices: list[int] = []
        for order in sorted(self.ngram_orders):
            if len(words) < order:
                continue
            for i in range(len(words) - order + 1):
                gram = " ".join(words[i : i + order])
                indices.append(stable_hash64(gram, seed=self.hash_seed) % self.bucket_count)
        return indices

    def to_config(self) -> dict:
        return {
            "ngram_orders": list(self.ngram_orders),
            "bucket_count": self.bucket_count,
            "hash_seed": self.hash_seed,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "NgramFeaturizer":
        return cls(
            ngram_orders=tuple(cfg["ngram_orders"]),
            bucket_count=int(cfg["bucket_count"]),
            hash_seed=int(cfg["hash_seed"]),
        )


class LinearClassifier:
    """Mean-of-embeddings linear classifier over hashed n-gram features."""

    def __init__(
        self,
        featurizer: NgramFeaturizer,
        input_table: np.ndarray,
        output_weights: np.ndarray,
        labels: list[str],
        train_accuracy: float | None = None,
    ):
        if input_table.shape[0] != featurizer.bucket_count:
            raise ValueError("input table rows must match featurizer bucket count")
        if output_weights.shape != (len(labels), input_table.shape[1]):
            raise ValueError("output weight shape must be (n_labels, dim)")
        self.featurizer = featurizer
        self.input_table = input_table
        self.output_weights = output_weights
        self.labels = list(labels)
        self.train_accuracy = train_accuracy

    @property
    def dim(self) -> int:
        return self.input_table.shape[1]

    def _hidden(self, indices: list[int]) -> np.ndarray:
        if not indices:
            return np.zeros(self.dim, dtype=self.input_table.dtype)
        uniq, counts = np.unique(np.asarray(indices, dtype=np.int64), return_counts=True)
        weights = counts.astype(self.input_table.dtype) / len(indices)
        return weights @ self.input_table[uniq]

    def predict_proba(self, text: str) -> np.ndarray:
        """Class probabilities in ``labels`` order; uniform for empty input."""
        indices = self.featurizer.featurize(text)
        if not indices:
            return np.full(len(self.labels), 1.0 / len(self.labels))
        logits = self.output_weights @ self._hidden(indices)
        return _softmax(logits)

    def predict(self, text: str) -> float:
        """Probability of the positive class."""
        try:
            pos = self.labels.index(POSITIVE_LABEL)
        except ValueError:
            raise ValueError(
                f"model labels {self.labels} have no {POSITIVE_LABEL!r} class; "
                "use predict_proba for non-binary models"
            ) from None
        return float(self.predict_proba(text)[pos])

    def save(self, path: str | Path) -> None:
        """Write a versioned binary container that round-trips bit-exactly."""
        header = json.dumps(
            {
                "featurizer": self.featurizer.to_config(),
                "dim": self.dim,
                "labels": self.labels,
                "train_accuracy": self.train_accuracy,
                "dtype": str(self.input_table.dtype),
            },
            sort_keys=True,
        ).encode("utf-8")
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<I", MODEL_VERSION))
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(np.ascontiguousarray(self.input_table).tobytes())
            fh.write(np.ascontiguousarray(self.output_weights).tobytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "LinearClassifier":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != MODEL_MAGIC:
                raise ValueError(f"{path}: not a classifier model file")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != MODEL_VERSION:
                raise ValueError(f"{path}: unsupported model version {version}")
            (header_len,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(header_len).decode("utf-8"))
            featurizer = NgramFeaturizer.from_config(header["featurizer"])
            dim = int(header["dim"])
            labels = [str(x) for x in header["labels"]]
            dtype = np.dtype(header["dtype"])
            n_in = featurizer.bucket_count * dim
            input_table = np.frombuffer(fh.read(n_in * dtype.itemsize), dtype=dtype)
            input_table = input_table.reshape(featurizer.bucket_count, dim).copy()
            n_out = len(labels) * dim
            output_weights = np.frombuffer(fh.read(n_out * dtype.itemsize), dtype=dtype)
            output_weights = output_weights.reshape(len(labels), dim).copy()
        return cls(featurizer, input_table, output_weights, labels, header["train_accuracy"])


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def example_loss_and_grads(
    input_table: np.ndarray,
    output_weights: np.ndarray,
    feature_rows: np.ndarray,
    feature_weights: np.ndarray,
    label_index: int,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Cross-entropy loss and its gradients for one example.

    ``feature_rows`` are the unique feature indices and ``feature_weights``
    their multiset frequencies (summing to 1). Returns (loss, grad w.r.t.
    output_weights, grad w.r.t. the selected input rows).
    """
    hidden = feature_weights @ input_table[feature_rows]
    probs = _softmax(output_weights @ hidden)
    loss = -float(np.log(max(probs[label_index], 1e-300)))
    grad_logits = probs.copy()
    grad_logits[label_index] -= 1.0
    grad_out = np.outer(grad_logits, hidden)
    grad_hidden = output_weights.T @ grad_logits
    grad_rows = np.outer(feature_weights, grad_hidden)
    return loss, grad_out, grad_rows


@dataclass
class TrainReport:
    examples_used: int
    skipped_empty: int
    train_accuracy: float


def train(
    examples: Iterable[tuple[str, str]],
    dim: int = 16,
    epochs: int = 5,
    lr: float = 0.1,
    seed: int = 0,
    featurizer: NgramFeaturizer | None = None,
) -> tuple[LinearClassifier, TrainReport]:
    """Train the classifier on (text, label) pairs.

    Deterministic given (examples, seed): example order is shuffled with a
    seeded generator each epoch and updates are applied sequentially. Examples
    whose text produces no features are skipped and counted.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    featurizer = featurizer or NgramFeaturizer()

    pairs = list(examples)
    labels = sorted({label for _, label in pairs})
    if len(labels) < 2:
        raise ValueError(f"need at least two classes, got labels={labels}")
    label_index = {label: i for i, label in enumerate(labels)}

    feats: list[tuple[np.ndarray, np.ndarray, int]] = []
    skipped_empty = 0
    for text, label in pairs:
        indices = featurizer.featurize(text)
        if not indices:
            skipped_empty += 1
            continue
        uniq, counts = np.unique(np.asarray(indices, dtype=np.int64), return_counts=True)
        weights = counts.astype(np.float64) / len(indices)
        feats.append((uniq, weights, label_index[label]))
    if not feats:
        raise ValueError("no trainable examples: every text featurized to nothing")
    used_labels = {y for _, _, y in feats}
    if len(used_labels) < 2:
        raise ValueError("after skipping empty texts only one class remains")

    rng = np.random.default_rng(seed)
    table = rng.uniform(-1.0 / dim, 1.0 / dim, size=(featurizer.bucket_count, dim))
    out = np.zeros((len(labels), dim), dtype=np.float64)

    n = len(feats)
    total_updates = epochs * n
    step = 0
    for _ in range(epochs):
        for idx in rng.permutation(n):
            uniq, weights, y = feats[idx]
            rate = lr * (1.0 - step / total_updates)
            step += 1
            _, grad_out, grad_rows = example_loss_and_grads(table, out, uniq, weights, y)
            out -= rate * grad_out
            table[uniq] -= rate * grad_rows

    correct = 0
    for uniq, weights, y in feats:
        logits = out @ (weights @ table[uniq])
        if int(np.argmax(logits)) == y:
            correct += 1
    accuracy = correct / n

    model = LinearClassifier(featurizer, table, out, labels, train_accuracy=accuracy)
    return model, TrainReport(examples_used=n, skipped_empty=skipped_empty, train_accuracy=accuracy)


def build_training_set(
    positives: Iterable[Document],
    negative_pool: Iterable[Document],
    ratio: int = 10,
    seed: int = 0,
) -> list[tuple[str, str]]:
    """All positives plus ratio-for-one reservoir-sampled negatives, shuffled.

    Sampling is uniform without replacement over the negative stream and fully
    determined by (stream order, seed). Raises when the pool is too small.
    """
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    rng = np.random.default_rng(seed)
    pos = [(doc.text, POSITIVE_LABEL) for doc in positives]
    if not pos:
        raise ValueError("no positive examples supplied")
    want = ratio * len(pos)

    # Reservoir sampling (algorithm R) so the pool never has to fit in memory.
    reservoir: list[str] = []
    seen = 0
    for doc in negative_pool:
        if seen < want:
            reservoir.append(doc.text)
        else:
            j = int(rng.integers(0, seen + 1))
            if j < want:
                reservoir[j] = doc.text
        seen += 1
    if seen < want:
        raise ValueError(
            f"insufficient negatives: need {want} (= {ratio} x {len(pos)} positives), "
            f"pool has {seen}"
        )

    labeled = pos + [(text, NEGATIVE_LABEL) for text in reservoir]
    order = rng.permutation(len(labeled))
    return [labeled[i] for i in order]


@dataclass
class ThresholdCalibration:
    threshold: float
    achieved_tokens: int
    target_tokens: int
    achieved_docs: int
    budget_exceeds_corpus: bool = False


def score_corpus(
    manifest: CorpusManifest,
    model: LinearClassifier,
    tokenizer: Tokenizer,
) -> tuple[np.ndarray, np.ndarray]:
    """Positive-class score and token count per document, in corpus order."""
    scores: list[float] = []
    tokens: list[int] = []
    for doc in read_manifest_docs(manifest):
        scores.append(model.predict(doc.text))
        tokens.append(count_tokens(doc, tokenizer))
    return np.asarray(scores, dtype=np.float64), np.asarray(tokens, dtype=np.int64)


def calibrate_threshold(
    model: LinearClassifier,
    manifest: CorpusManifest,
    target_tokens: int,
    tokenizer: Tokenizer,
) -> ThresholdCalibration:
    """Largest observed-score threshold whose kept-token count meets the budget.

    One scoring pass plus a sort; no repeated corpus scans. A zero budget
    returns the upper boundary 1.0; a budget at or above the corpus total
    collapses to 0.0 (with a warning flag when it exceeds the total).
    """
    if target_tokens < 0:
        raise ValueError(f"target_tokens must be >= 0, got {target_tokens}")
    scores, tokens = score_corpus(manifest, model, tokenizer)
    total = int(tokens.sum())

    if target_tokens == 0:
        kept = scores >= 1.0
        return ThresholdCalibration(1.0, int(tokens[kept].sum()), 0, int(kept.sum()))
    if target_tokens >= total:
        return ThresholdCalibration(
            0.0, total, target_tokens, len(scores),
            budget_exceeds_corpus=target_tokens > total,
        )

    order = np.argsort(-scores, kind="stable")
    cumulative = np.cumsum(tokens[order])
    pos = int(np.searchsorted(cumulative, target_tokens))
    threshold = float(scores[order[pos]])
    kept = scores >= threshold
    return ThresholdCalibration(threshold, int(tokens[kept].sum()), target_tokens, int(kept.sum()))


@dataclass
class FilterStats:
    kept: int = 0
    dropped: int = 0
    skipped_empty: int = 0


def filter_corpus(
    manifest: CorpusManifest,
    model: LinearClassifier,
    threshold: float,
    out_dir: str | Path,
    tokenizer: Tokenizer,
    max_per_shard: int = 100_000,
    stage_name: str = "classifier-filter",
) -> tuple[CorpusManifest, FilterStats]:
    """Keep documents scoring at or above the threshold, recording the score.

    Empty-text documents are dropped with a counted skip rather than scored.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    stats = FilterStats()

    def kept_docs() -> Iterator[Document]:
        for doc in read_manifest_docs(manifest):
            if not doc.text.strip():
                stats.skipped_empty += 1
                continue
            score = model.predict(doc.text)
            if score >= threshold:
                doc.meta[SCORE_META_KEY] = repr(score)
                stats.kept += 1
                yield doc
            else:
                stats.dropped += 1

    out = write_shards(
        kept_docs(),
        out_dir,
        max_per_shard=max_per_shard,
        tokenizer=tokenizer,
        provenance=[*manifest.provenance, stage_name],
    )
    return out, stats
