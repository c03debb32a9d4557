"""Config-driven orchestration of the curation stages.

Stages run strictly in dependency order (filter, minhash, embed, semdedup,
then optional d4). Every completed stage writes a marker holding a chained
config hash and its report; rerunning a pipeline skips stages whose marker
chain still matches, so a killed run resumes where it stopped and a config
edit invalidates only the stages at and after the change. One pipeline
instance per output directory is enforced with a pid lock file.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import yaml

from . import classifier as clf
from . import minhash as mh
from . import semdedup as sd
from .corpus import CorpusManifest, load_manifest, save_manifest
from .embedding import EmbedderSpec, embed_corpus, load_vectors
from .energy import DeviceSpec, stage_energy
from .hashing import config_hash
from .tokenizers import Tokenizer, get_tokenizer

STAGE_ORDER = ["filter", "minhash", "embed", "semdedup", "d4"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


class ConfigError(Exception):
    """Pre-flight configuration problem; nothing has run."""


class StageError(Exception):
    """A stage failed mid-run; completed stages remain resumable."""


@dataclass
class StageReport:
    stage: str
    docs_in: int
    docs_out: int
    tokens_in: int
    tokens_out: int
    wall_hours: float
    device_count: int
    device_tdp_watts: float
    energy_wh: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "StageReport":
        return cls(**payload)


@dataclass
class PipelineConfig:
    input_manifest: str
    output_dir: str
    stages: list[dict]
    seed: int = 0
    tokenizer: str = "whitespace"
    workers: int = 1
    devices: dict = field(default_factory=lambda: {"name": "cpu-core", "tdp_watts": 3.75, "count": 1})
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError(f"config root must be a mapping, got {type(payload).__name__}")
        return cls.from_dict(payload, base_dir=path.parent)

    @classmethod
    def from_dict(cls, payload: dict, base_dir: Path | None = None) -> "PipelineConfig":
        def resolve(p: str) -> str:
            p = Path(p)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            return str(p)

        try:
            cfg = cls(
                input_manifest=resolve(payload["input_manifest"]),
                output_dir=resolve(payload["output_dir"]),
                stages=list(payload["stages"]),
                seed=int(payload.get("seed", 0)),
                tokenizer=str(payload.get("tokenizer", "whitespace")),
                workers=int(payload.get("workers", 1)),
                devices=dict(payload.get("devices", {"name": "cpu-core", "tdp_watts": 3.75, "count": 1})),
                raw=payload,
            )
        except KeyError as exc:
            raise ConfigError(f"config is missing required key {exc}") from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        names = []
        for stage in self.stages:
            if not isinstance(stage, dict) or "name" not in stage:
                raise ConfigError(f"every stage needs a name, got {stage!r}")
            names.append(stage["name"])
        if not names:
            raise ConfigError("config declares no stages")
        unknown = [n for n in names if n not in STAGE_ORDER]
        if unknown:
            raise ConfigError(f"unknown stages {unknown}; known: {STAGE_ORDER}")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate stages in {names}")
        positions = [STAGE_ORDER.index(n) for n in names]
        if positions != sorted(positions):
            raise ConfigError(
                f"stage order {names} violates the dependency order {STAGE_ORDER}"
            )
        if "semdedup" in names and "embed" not in names:
            raise ConfigError("semdedup requires an embed stage before it")
        if "d4" in names and "semdedup" not in names:
            raise ConfigError("d4 requires a semdedup stage before it")
        if "embed" in names:
            embed_cfg = self.stage_config("embed")
            level = embed_cfg.get("level", "document")
            for follower in ("semdedup",):
                if follower in names:
                    wanted = self.stage_config(follower).get("level", "document")
                    if wanted != level:
                        raise ConfigError(
                            f"{follower} level {wanted!r} does not match embed level {level!r}"
                        )
            if "d4" in names and level != "document":
                raise ConfigError("d4 needs document-level embeddings")
        device_spec(self.devices)  # raises on nonsense
        for stage in self.stages:
            if "devices" in stage:
                device_spec(stage["devices"])

    def stage_config(self, name: str) -> dict:
        for stage in self.stages:
            if stage["name"] == name:
                return stage
        raise KeyError(name)

    def get_tokenizer(self) -> Tokenizer:
        try:
            return get_tokenizer(self.tokenizer)
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc


def device_spec(payload: dict) -> DeviceSpec:
    try:
        return DeviceSpec(
            name=str(payload.get("name", "device")),
            tdp_watts=float(payload["tdp_watts"]),
            count=int(payload["count"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad device inventory {payload!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# Locking and markers

class _PipelineLock:
    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def acquire(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            try:
                pid = int(self.path.read_text().strip())
                os.kill(pid, 0)
            except (ValueError, ProcessLookupError):
                self.path.unlink(missing_ok=True)  # stale lock
            except PermissionError:
                raise StageError(f"output dir is locked by running pid in {self.path}")
            else:
                raise StageError(f"another pipeline instance (pid {pid}) owns {self.path.parent}")
        fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))

    def release(self) -> None:
        self.path.unlink(missing_ok=True)


def _marker_path(out_dir: Path, index: int, name: str) -> Path:
    return out_dir / "markers" / f"{index:02d}-{name}.json"


def _write_marker(path: Path, chain: str, report: StageReport, manifest_path: Path, extras: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "chain_hash": chain,
        "report": report.to_dict(),
        "manifest": str(manifest_path),
        "extras": extras,
    }
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Stage implementations

def _manifest_totals(manifest: CorpusManifest) -> tuple[int, int]:
    return manifest.doc_count, manifest.token_count


def _run_filter(cfg: PipelineConfig, stage: dict, manifest, stage_dir, tokenizer, context, stage_name):
    model_path = stage.get("model")
    if not model_path:
        raise StageError("filter stage needs a trained model path")
    model = clf.LinearClassifier.load(model_path)
    threshold = stage.get("threshold")
    if threshold is None:
        target = stage.get("target_tokens")
        if target is None:
            raise StageError("filter stage needs either threshold or target_tokens")
        calibration = clf.calibrate_threshold(model, manifest, int(target), tokenizer)
        threshold = calibration.threshold
        context["calibration"] = calibration
    out, _stats = clf.filter_corpus(
        manifest, model, float(threshold), stage_dir, tokenizer, stage_name=stage_name
    )
    return out, {"threshold": float(threshold)}


def _run_minhash(cfg: PipelineConfig, stage: dict, manifest, stage_dir, tokenizer, context, stage_name):
    params = mh.MinHashParams(
        bands=int(stage.get("bands", 20)),
        rows_per_band=int(stage.get("rows_per_band", 20)),
        shingle_size=int(stage.get("shingle_size", 5)),
        hash_seed=int(stage.get("seed", cfg.seed)),
    )
    out, stats = mh.minhash_dedup(
        manifest,
        params,
        work_dir=stage_dir / "work",
        out_dir=stage_dir,
        tokenizer=tokenizer,
        workers=cfg.workers,
        stage_name=stage_name,
    )
    return out, {"pairs": stats.pairs, "clusters": stats.clusters, "removed": stats.removed}


def _run_embed(cfg: PipelineConfig, stage: dict, manifest, stage_dir, tokenizer, context, stage_name):
    spec_cfg = dict(stage.get("embedder") or {})
    spec_cfg.setdefault("hash_seed", cfg.seed)
    spec = EmbedderSpec.from_config(spec_cfg)
    level = stage.get("level", "document")
    vectors_path = stage_dir / "vectors.bin"
    embed_corpus(
        manifest,
        spec,
        tokenizer,
        vectors_path,
        level=level,
        max_tokens=int(stage.get("max_tokens", 512)),
        workers=cfg.workers,
    )
    context["vectors"] = str(vectors_path)
    context["embed_level"] = level
    out = CorpusManifest(
        shards=list(manifest.shards),
        shard_counts=list(manifest.shard_counts),
        doc_count=manifest.doc_count,
        token_count=manifest.token_count,
        provenance=[*manifest.provenance, stage_name],
    )
    return out, {"vectors": str(vectors_path), "embed_level": level}


def _vectors_from_context(context: dict):
    vectors_path = context.get("vectors")
    if not vectors_path:
        raise StageError("no embeddings available; did the embed stage run?")
    return load_vectors(vectors_path)


def _run_semdedup(cfg: PipelineConfig, stage: dict, manifest, stage_dir, tokenizer, context, stage_name):
    ids, X = _vectors_from_context(context)
    level = stage.get("level", "document")
    sd_cfg = sd.SemDedupConfig(
        n_clusters=int(stage.get("n_clusters", 1000)),
        tau=float(stage.get("tau", 0.15)),
        level="chunk" if level == "chunk" else "document",
        keep_policy=stage.get("keep_policy", sd.KEEP_FARTHEST),
        tau_metric=stage.get("tau_metric", sd.METRIC_DISTANCE),
        seed=int(stage.get("seed", cfg.seed)),
        emit_chunks_as_docs=bool(stage.get("emit_chunks_as_docs", False)),
    )
    out, report = sd.semdedup_corpus(
        manifest, ids, X, sd_cfg, stage_dir, tokenizer,
        stage_name=stage_name, artifacts_dir=stage_dir / "artifacts",
    )
    context["semdedup_clusters"] = sd_cfg.n_clusters
    return out, {
        "removal_fraction": report.removal_fraction,
        "semdedup_clusters": sd_cfg.n_clusters,
    }


def _run_d4(cfg: PipelineConfig, stage: dict, manifest, stage_dir, tokenizer, context, stage_name):
    ids, X = _vectors_from_context(context)
    d4_cfg = sd.D4Config(
        recluster_k=int(stage.get("recluster_k", context.get("semdedup_clusters", 1000))),
        r_proto=float(stage.get("r_proto", 0.75)),
        seed=int(stage.get("seed", cfg.seed)),
    )
    out, report = sd.d4_prune(manifest, ids, X, d4_cfg, stage_dir, tokenizer, stage_name=stage_name)
    return out, {"removal_fraction": report.removal_fraction}


_STAGE_RUNNERS = {
    "filter": _run_filter,
    "minhash": _run_minhash,
    "embed": _run_embed,
    "semdedup": _run_semdedup,
    "d4": _run_d4,
}

_SHRINKING_STAGES = {"filter", "minhash", "semdedup", "d4"}


# ---------------------------------------------------------------------------
# Orchestration

def run_pipeline(
    cfg: PipelineConfig,
    on_stage_complete: Callable[[str, StageReport], None] | None = None,
) -> tuple[list[StageReport], Path]:
    """Execute (or resume) all configured stages.

    Returns the per-stage reports and the path of the final manifest. The
    optional callback fires after each stage's marker is written, so a crash
    inside it leaves the run resumable at the next stage.
    """
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not Path(cfg.input_manifest).exists():
        raise ConfigError(f"input manifest not found: {cfg.input_manifest}")
    tokenizer = cfg.get_tokenizer()

    lock = _PipelineLock(out_dir)
    lock.acquire()
    try:
        manifest = load_manifest(cfg.input_manifest)
        reports: list[StageReport] = []
        context: dict = {}
        chain = config_hash({"seed": cfg.seed, "tokenizer": cfg.tokenizer})
        invalidated = False
        manifest_path = Path(cfg.input_manifest)

        for index, stage in enumerate(cfg.stages):
            name = stage["name"]
            chain = config_hash({"prev": chain, "stage": stage})
            stage_name = f"{name}@{chain[:12]}"
            stage_dir = out_dir / f"{index:02d}-{name}"
            marker = _marker_path(out_dir, index, name)

            if not invalidated and marker.exists():
                payload = json.loads(marker.read_text(encoding="utf-8"))
                if payload.get("chain_hash") == chain and Path(payload["manifest"]).exists():
                    report = StageReport.from_dict(payload["report"])
                    reports.append(report)
                    manifest_path = Path(payload["manifest"])
                    manifest = load_manifest(manifest_path)
                    context.update(payload.get("extras", {}))
                    if on_stage_complete:
                        on_stage_complete(name, report)
                    continue
            # This stage (re)runs, so everything downstream is stale.
            invalidated = True
            for later in range(index, len(cfg.stages)):
                _marker_path(out_dir, later, cfg.stages[later]["name"]).unlink(missing_ok=True)

            docs_in, tokens_in = _manifest_totals(manifest)
            devices = device_spec(stage.get("devices", cfg.devices))
            started = time.monotonic()
            try:
                out_manifest, extras = _STAGE_RUNNERS[name](
                    cfg, stage, manifest, stage_dir, tokenizer, context, stage_name
                )
            except (ConfigError, StageError):
                raise
            except Exception as exc:
                raise StageError(f"stage {name} failed: {exc}") from exc
            wall_hours = (time.monotonic() - started) / 3600.0

            docs_out, tokens_out = _manifest_totals(out_manifest)
            if name in _SHRINKING_STAGES and docs_out > docs_in:
                raise StageError(f"stage {name} grew the corpus: {docs_in} -> {docs_out}")

            manifest = out_manifest
            manifest_path = stage_dir / "manifest.json"
            save_manifest(manifest, manifest_path)

            report = StageReport(
                stage=name,
                docs_in=docs_in,
                docs_out=docs_out,
                tokens_in=tokens_in,
                tokens_out=tokens_out,
                wall_hours=wall_hours,
                device_count=devices.count,
                device_tdp_watts=devices.tdp_watts,
                energy_wh=stage_energy(wall_hours, devices),
            )
            reports.append(report)
            _write_marker(marker, chain, report, manifest_path, extras)
            if on_stage_complete:
                on_stage_complete(name, report)

        return reports, manifest_path
    finally:
        lock.release()


def load_reports(out_dir: str | Path) -> list[StageReport]:
    """Stage reports recorded by a previous run, in stage order."""
    markers = sorted(Path(out_dir).glob("markers/*.json"))
    reports = []
    for marker in markers:
        payload = json.loads(marker.read_text(encoding="utf-8"))
        reports.append(StageReport.from_dict(payload["report"]))
    return reports


# ---------------------------------------------------------------------------
# Reporting

@dataclass
class PipelineSummary:
    stages: list[StageReport]

    def to_dict(self) -> dict:
        docs_in = self.stages[0].docs_in if self.stages else 0
        docs_out = self.stages[-1].docs_out if self.stages else 0
        tokens_in = self.stages[0].tokens_in if self.stages else 0
        tokens_out = self.stages[-1].tokens_out if self.stages else 0
        return {
            "stages": [s.to_dict() for s in self.stages],
            "docs_in": docs_in,
            "docs_out": docs_out,
            "tokens_in": tokens_in,
            "tokens_out": tokens_out,
            "removal_fraction": 0.0 if docs_in == 0 else 1.0 - docs_out / docs_in,
            "total_energy_wh": sum(s.energy_wh for s in self.stages),
        }

    def to_text(self) -> str:
        lines = [
            f"{'stage':<12} {'docs in':>10} {'docs out':>10} {'tokens out':>12} "
            f"{'hours':>8} {'Wh':>10}"
        ]
        for s in self.stages:
            lines.append(
                f"{s.stage:<12} {s.docs_in:>10} {s.docs_out:>10} {s.tokens_out:>12} "
                f"{s.wall_hours:>8.3f} {s.energy_wh:>10.2f}"
            )
        totals = self.to_dict()
        lines.append(
            f"{'total':<12} {totals['docs_in']:>10} {totals['docs_out']:>10} "
            f"{totals['tokens_out']:>12} {'':>8} {totals['total_energy_wh']:>10.2f}"
        )
        lines.append(f"cumulative removal: {100.0 * totals['removal_fraction']:.2f}%")
        return "\n".join(lines)


def report_stats(reports: list[StageReport]) -> PipelineSummary:
    return PipelineSummary(stages=list(reports))
