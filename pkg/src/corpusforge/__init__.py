"""corpusforge: streaming corpus curation for domain-adaptive pretraining.

Stages: domain-classifier filtering calibrated to a token budget, MinHash
near-duplicate removal, chunked document embeddings, semantic deduplication
with optional prototype pruning, and TDP-based energy accounting.
"""

from .corpus import (
    CorpusManifest,
    Document,
    ReadStats,
    count_tokens,
    load_manifest,
    read_shards,
    save_manifest,
    write_shards,
)
from .classifier import (
    LinearClassifier,
    NgramFeaturizer,
    ThresholdCalibration,
    build_training_set,
    calibrate_threshold,
    filter_corpus,
    train,
)
from .embedding import (
    Chunk,
    EmbedderSpec,
    EmbeddingVector,
    HashingEmbedder,
    RemoteEmbedder,
    chunk_document,
    create_embedder,
    embed_corpus,
    embed_document,
    load_vectors,
)
from .energy import DeviceSpec, TrainingRunSpec, net_gain, stage_energy, training_energy_at_step
from .minhash import (
    DuplicateClusters,
    MinHashParams,
    MinHashSignature,
    bucket_keys,
    cluster,
    estimate_jaccard,
    filter_duplicates,
    minhash_dedup,
    shingle,
    signature,
)
from .pipeline import (
    ConfigError,
    PipelineConfig,
    StageError,
    StageReport,
    report_stats,
    run_pipeline,
)
from .semdedup import (
    D4Config,
    KMeansModel,
    SemDedupConfig,
    assign,
    d4_prune,
    kmeans_fit,
    prune_cluster,
    semdedup_corpus,
)
from .tokenizers import WhitespaceTokenizer, get_tokenizer, register_tokenizer

__version__ = "0.1.0"
