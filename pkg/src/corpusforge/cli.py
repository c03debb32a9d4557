"""Command line front end.

`corpusforge run` executes a declarative pipeline config; the per-stage
subcommands expose the same operations for manual or resumed use. Exit codes:
0 success, 2 configuration error, 3 stage failure (the run is resumable).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import classifier as clf
from . import minhash as mh
from . import semdedup as sd
from .corpus import load_manifest, read_shards, save_manifest, write_shards
from .embedding import EmbedderSpec, embed_corpus
from .pipeline import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_STAGE,
    ConfigError,
    PipelineConfig,
    StageError,
    load_reports,
    report_stats,
    run_pipeline,
)
from .tokenizers import get_tokenizer


def _done_marker(path: Path) -> Path:
    return Path(str(path) + ".done")


def _skip_if_done(out: Path, force: bool) -> bool:
    marker = _done_marker(out)
    if marker.exists() and not force:
        print(f"{out}: already complete, skipping (use --force to redo)")
        return True
    return False


def _mark_done(out: Path) -> None:
    _done_marker(out).write_text("done\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommand handlers

def cmd_run(args) -> int:
    cfg = PipelineConfig.from_file(args.config)

    def progress(name, report):
        print(
            f"[{name}] docs {report.docs_in} -> {report.docs_out}, "
            f"{report.wall_hours * 3600:.1f}s, {report.energy_wh:.4f} Wh"
        )

    reports, final_manifest = run_pipeline(cfg, on_stage_complete=progress)
    summary = report_stats(reports)
    print(summary.to_text())
    print(f"final manifest: {final_manifest}")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = load_reports(args.run_dir)
    summary = report_stats(reports)
    if args.out:
        Path(args.out).write_text(
            json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        print(f"wrote {args.out}")
    print(summary.to_text())
    return EXIT_OK


def cmd_ingest(args) -> int:
    docs = read_shards(args.inputs)
    manifest = write_shards(
        docs,
        args.out,
        max_per_shard=args.max_per_shard,
        compress=args.compress,
        tokenizer=get_tokenizer(args.tokenizer),
        provenance=["ingest"],
    )
    save_manifest(manifest, Path(args.out) / "manifest.json")
    print(f"{manifest.doc_count} docs, {manifest.token_count} tokens, {len(manifest.shards)} shards")
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    positives = read_shards(args.positives)
    negatives = read_shards(args.negatives)
    examples = clf.build_training_set(positives, negatives, ratio=args.ratio, seed=args.seed)
    featurizer = clf.NgramFeaturizer(
        ngram_orders=tuple(args.ngram_orders),
        bucket_count=args.buckets,
        hash_seed=args.seed,
    )
    model, report = clf.train(
        examples,
        dim=args.dim,
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        featurizer=featurizer,
    )
    model.save(args.out)
    print(
        f"trained on {report.examples_used} examples "
        f"(skipped {report.skipped_empty} empty), accuracy {report.train_accuracy:.4f}"
    )
    print(f"model written to {args.out}")
    return EXIT_OK


def cmd_filter(args) -> int:
    manifest = load_manifest(args.input)
    model = clf.LinearClassifier.load(args.model)
    tokenizer = get_tokenizer(args.tokenizer)
    threshold = args.threshold
    if threshold is None:
        if args.target_tokens is None:
            raise ConfigError("filter needs --threshold or --target-tokens")
        calibration = clf.calibrate_threshold(model, manifest, args.target_tokens, tokenizer)
        threshold = calibration.threshold
        print(
            f"calibrated threshold {threshold:.6f}: {calibration.achieved_tokens} tokens "
            f"in {calibration.achieved_docs} docs (target {calibration.target_tokens})"
        )
        if calibration.budget_exceeds_corpus:
            print("warning: budget exceeds corpus total; keeping everything", file=sys.stderr)
    out, stats = clf.filter_corpus(manifest, model, threshold, args.out, tokenizer)
    save_manifest(out, Path(args.out) / "manifest.json")
    print(f"kept {stats.kept}, dropped {stats.dropped}, skipped empty {stats.skipped_empty}")
    return EXIT_OK


def _minhash_params(args) -> mh.MinHashParams:
    return mh.MinHashParams(
        bands=args.bands,
        rows_per_band=args.rows,
        shingle_size=args.shingle_size,
        hash_seed=args.seed,
    )


def cmd_minhash_sign(args) -> int:
    out = Path(args.out)
    if _skip_if_done(out, args.force):
        return EXIT_OK
    manifest = load_manifest(args.input)
    params = _minhash_params(args)
    from .corpus import read_manifest_docs

    with mh.SignatureWriter(out, params) as writer:
        for sig in mh.compute_signatures(read_manifest_docs(manifest), params, workers=args.workers):
            writer.write(sig)
    _mark_done(out)
    print(f"signed {writer.count} docs -> {out}")
    return EXIT_OK


def cmd_minhash_bucket(args) -> int:
    out = Path(args.out)
    if _skip_if_done(out, args.force):
        return EXIT_OK
    out.parent.mkdir(parents=True, exist_ok=True)
    pairs = mh.generate_candidate_pairs(
        mh.read_signatures(args.signatures), out.parent, max_buffered=args.max_buffered
    )
    n = mh.write_pairs(out, pairs)
    _mark_done(out)
    print(f"{n} candidate pairs -> {out}")
    return EXIT_OK


def cmd_minhash_cluster(args) -> int:
    out = Path(args.out)
    if _skip_if_done(out, args.force):
        return EXIT_OK
    clusters = mh.cluster(mh.read_pairs(args.pairs))
    n = mh.write_cluster_map(out, clusters)
    _mark_done(out)
    print(f"{len(clusters.clusters())} clusters ({n} clustered docs) -> {out}")
    return EXIT_OK


def cmd_minhash_filter(args) -> int:
    clusters = mh.read_cluster_map(args.clusters)
    manifest = load_manifest(args.input)
    out, stats = mh.filter_duplicates(clusters, manifest, args.out, tokenizer=get_tokenizer(args.tokenizer))
    save_manifest(out, Path(args.out) / "manifest.json")
    print(f"removed {stats.removed} of {stats.docs} docs across {stats.clusters} clusters")
    return EXIT_OK


def cmd_embed(args) -> int:
    manifest = load_manifest(args.input)
    spec = EmbedderSpec(
        kind=args.kind,
        dim=args.dim,
        endpoint=args.endpoint or "",
        batch_size=args.batch_size,
        hash_seed=args.seed,
    )
    stats = embed_corpus(
        manifest,
        spec,
        get_tokenizer(args.tokenizer),
        args.out,
        level=args.level,
        max_tokens=args.max_tokens,
        workers=args.workers,
    )
    print(
        f"embedded {stats.vectors} vectors from {stats.docs} docs "
        f"({stats.chunks} chunks, {stats.skipped_empty} empty skipped)"
    )
    return EXIT_OK


def _load_vectors_arg(path):
    from .embedding import load_vectors

    return load_vectors(path)


def cmd_semdedup(args) -> int:
    manifest = load_manifest(args.input)
    ids, X = _load_vectors_arg(args.vectors)
    cfg = sd.SemDedupConfig(
        n_clusters=args.clusters,
        tau=args.tau,
        level="chunk" if args.level == "chunk" else "document",
        keep_policy=args.keep,
        tau_metric=args.tau_metric,
        seed=args.seed,
        emit_chunks_as_docs=args.emit_chunks,
    )
    out, report = sd.semdedup_corpus(
        manifest, ids, X, cfg, args.out, get_tokenizer(args.tokenizer),
        artifacts_dir=Path(args.out) / "artifacts",
    )
    save_manifest(out, Path(args.out) / "manifest.json")
    print(
        f"kept {report.docs_kept} of {report.docs_in} docs "
        f"({100.0 * report.removal_fraction:.2f}% removed, {report.n_clusters} clusters)"
    )
    return EXIT_OK


def cmd_d4(args) -> int:
    manifest = load_manifest(args.input)
    ids, X = _load_vectors_arg(args.vectors)
    cfg = sd.D4Config(recluster_k=args.clusters, r_proto=args.rproto, seed=args.seed)
    out, report = sd.d4_prune(manifest, ids, X, cfg, args.out, get_tokenizer(args.tokenizer))
    save_manifest(out, Path(args.out) / "manifest.json")
    print(
        f"kept {report.docs_kept} of {report.docs_in} docs "
        f"({100.0 * report.removal_fraction:.2f}% removed)"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corpusforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a pipeline config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("report", help="summarize a finished or partial run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", help="also write the JSON summary here")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("ingest", help="re-shard raw jsonl files and write a manifest")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--max-per-shard", type=int, default=100_000)
    p.add_argument("--compress", action="store_true")
    p.add_argument("--tokenizer", default="whitespace")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train-classifier", help="train the domain classifier")
    p.add_argument("--positives", nargs="+", required=True)
    p.add_argument("--negatives", nargs="+", required=True)
    p.add_argument("--ratio", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--buckets", type=int, default=2_000_000)
    p.add_argument("--ngram-orders", type=int, nargs="+", default=[1, 2])
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_classifier)

    p = sub.add_parser("filter", help="apply the classifier at a threshold or token budget")
    p.add_argument("--input", required=True, help="input manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--target-tokens", type=int)
    p.add_argument("--tokenizer", default="whitespace")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_filter)

    p = sub.add_parser("minhash", help="lexical near-duplicate removal stages")
    mh_sub = p.add_subparsers(dest="minhash_command", required=True)

    def add_minhash_params(q):
        q.add_argument("--bands", type=int, default=20)
        q.add_argument("--rows", type=int, default=20)
        q.add_argument("--shingle-size", type=int, default=5)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--force", action="store_true")

    q = mh_sub.add_parser("sign", help="compute signature shards")
    q.add_argument("--input", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--workers", type=int, default=1)
    add_minhash_params(q)
    q.set_defaults(fn=cmd_minhash_sign)

    q = mh_sub.add_parser("bucket", help="band signatures into candidate pairs")
    q.add_argument("--signatures", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--max-buffered", type=int, default=1_000_000)
    q.add_argument("--force", action="store_true")
    q.set_defaults(fn=cmd_minhash_bucket)

    q = mh_sub.add_parser("cluster", help="union candidate pairs into clusters")
    q.add_argument("--pairs", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--force", action="store_true")
    q.set_defaults(fn=cmd_minhash_cluster)

    q = mh_sub.add_parser("filter", help="keep one document per duplicate cluster")
    q.add_argument("--clusters", required=True)
    q.add_argument("--input", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--tokenizer", default="whitespace")
    q.set_defaults(fn=cmd_minhash_filter)

    p = sub.add_parser("embed", help="embed a corpus into a vector shard")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["deterministic-test", "remote-service"], default="deterministic-test")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--endpoint", default="")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--level", choices=["document", "chunk"], default="document")
    p.add_argument("--max-tokens", type=int, default=512)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--tokenizer", default="whitespace")
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("semdedup", help="semantic dedup over embeddings")
    p.add_argument("--input", required=True)
    p.add_argument("--vectors", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int, default=1000)
    p.add_argument("--tau", type=float, default=0.15)
    p.add_argument("--level", choices=["doc", "document", "chunk"], default="document")
    p.add_argument("--keep", choices=[sd.KEEP_FARTHEST, sd.KEEP_SMALLEST_ID], default=sd.KEEP_FARTHEST)
    p.add_argument("--tau-metric", choices=[sd.METRIC_DISTANCE, sd.METRIC_SIMILARITY], default=sd.METRIC_DISTANCE)
    p.add_argument("--emit-chunks", action="store_true", help="emit surviving chunks as documents")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tokenizer", default="whitespace")
    p.set_defaults(fn=cmd_semdedup)

    p = sub.add_parser("d4", help="prototype pruning of a deduplicated corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--vectors", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rproto", type=float, default=0.75)
    p.add_argument("--clusters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tokenizer", default="whitespace")
    p.set_defaults(fn=cmd_d4)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
