"""End-to-end runs: corpus -> features -> training -> embeddings -> probe -> report.

Each run writes into ``<output_dir>/<config_hash>/`` so runs with different
configs never overwrite each other. Trained models are cached by the hash of
the training-relevant config, so runs that differ only in embedding or probe
settings train once. The report JSON holds no wall-clock times
or absolute paths, so identical configs give identical reports.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from contextlib import contextmanager
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import __version__
from .checkpoint import load_trainer, save_trainer
from .config import ExperimentConfig, expand_sweep
from .corpus import GENERATOR_VERSION, CorpusManifest, SyntheticTaskSpec, generate_synthetic_corpus, load_manifest
from .embeddings import scene_embedding, timestamp_embeddings, write_embeddings
from .encoders import Encoder, build_encoder
from .evaluation import EventClip, event_probe_metrics, scene_probe_metrics
from .features import D_SUP, extract_features, fit_standardizer
from .frontend import SAMPLE_RATE, AudioClip, NormalizationStats, compute_stats, log_mel, read_wav, resample
from .trainer import epoch_means, fit, init_state, jsonl_logger

CACHE_ENV = "BYOLS_CACHE_DIR"
REPORT_NAME = "report.json"
SUMMARY_NAME = "summary.json"


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    try:
        yield
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError(name, exc) from exc


def cache_dir(default: Path) -> Path:
    return Path(os.environ.get(CACHE_ENV) or default)


def synthetic_manifest(spec_dict: dict, cache_root: Path) -> Path:
    """Generate (or reuse) a synthetic corpus keyed by the hash of its spec."""
    spec = SyntheticTaskSpec(**spec_dict)
    keyed = {**spec.to_dict(), "generator_version": GENERATOR_VERSION}
    key = hashlib.sha256(json.dumps(keyed, sort_keys=True).encode()).hexdigest()[:16]
    out = cache_root / "corpora" / f"{spec.task}-{key}"
    manifest = out / "manifest.csv"
    if not manifest.is_file():
        generate_synthetic_corpus(spec, out)
    return manifest


def load_clips(manifest: CorpusManifest) -> list[AudioClip]:
    clips = []
    for r in manifest.records:
        c = read_wav(r.path, r.id)
        clips.append(c if c.sample_rate == SAMPLE_RATE else resample(c, SAMPLE_RATE))
    return clips


def embed_corpus(encoder: Encoder, stats: NormalizationStats, clips, mode: str, window_s: float, hop_s: float) -> list:
    """Scene: one Embedding per clip. Timestamp: one TimestampEmbeddingSet per clip."""
    if mode == "scene":
        return [scene_embedding(c, encoder, stats) for c in clips]
    return [timestamp_embeddings(c, encoder, stats, window_s, hop_s) for c in clips]


def probe_metrics(cfg: ExperimentConfig, manifest: CorpusManifest, clips, embedded) -> dict:
    pcfg = cfg.probe.build(cfg.seed)
    splits = [r.split for r in manifest.records]
    if cfg.embedding.mode == "scene":
        labels = [r.label for r in manifest.records]
        if any(lab is None for lab in labels):
            raise ValueError("scene probing needs a label for every clip")
        return scene_probe_metrics(np.stack([e.values for e in embedded]), labels, splits, pcfg)
    event_clips = [
        EventClip(s.timestamps, s.matrix(), list(r.events or []), c.duration, r.split)
        for s, r, c in zip(embedded, manifest.records, clips)
    ]
    return event_probe_metrics(
        event_clips,
        manifest.event_labels(),
        pcfg,
        thresholds=cfg.probe.thresholds,
        min_duration_hops=cfg.probe.min_duration_hops,
        tolerance_s=cfg.probe.onset_tolerance_s,
        segment_s=cfg.probe.segment_s,
    )


def _round(x, ndigits: int = 12):
    if isinstance(x, float):
        return round(x, ndigits)
    if isinstance(x, dict):
        return {k: _round(v, ndigits) for k, v in x.items()}
    if isinstance(x, list):
        return [_round(v, ndigits) for v in x]
    return x


def _training_key(cfg: ExperimentConfig) -> str:
    # code and generator versions are part of the key so upgrades never reuse stale models
    return f"{cfg.training_hash()}-v{__version__}-g{GENERATOR_VERSION}"


def _training_summary(history, epochs: int) -> dict:
    steps = max(1, len(history) // max(1, epochs))
    return {
        "steps": len(history),
        "epoch_l_hybrid": epoch_means(history, steps),
        "final_projection_variance": history[-1].projection_variance if history else None,
        "min_projection_variance": float(np.nanmin([x.projection_variance for x in history])) if history else None,
    }


def _store_trained(run_dir: Path, trained: Path, summary: dict) -> None:
    """Copy the fresh model into the training cache; the summary file is written last and marks completion."""
    trained.mkdir(parents=True, exist_ok=True)
    for name in ("checkpoint.byck", "train_log.jsonl"):
        shutil.copyfile(run_dir / name, trained / name)
    tmp = trained / (SUMMARY_NAME + ".tmp")
    tmp.write_text(json.dumps(summary, sort_keys=True))
    os.replace(tmp, trained / SUMMARY_NAME)


def run_single(cfg: ExperimentConfig, log: Callable[[str], None] | None = None) -> Path:
    """Execute one concrete config; returns the report path."""
    say = log or (lambda msg: None)
    h = cfg.config_hash()
    out_root = Path(cfg.output_dir)
    run_dir = out_root / h
    run_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)  # thread count changes float reduction order

    with stage("corpus"):
        cache = cache_dir(out_root)
        c = cfg.corpus
        manifest_path = Path(c.manifest) if c.manifest else synthetic_manifest(c.synthetic, cache)
        manifest = load_manifest(manifest_path)
        clips = load_clips(manifest)
        lms = [log_mel(x) for x in clips]
        stats = compute_stats(lms)
        if c.eval_manifest or c.eval_synthetic:
            eval_path = Path(c.eval_manifest) if c.eval_manifest else synthetic_manifest(c.eval_synthetic, cache)
            eval_manifest = load_manifest(eval_path)
            eval_clips = load_clips(eval_manifest)
        else:
            eval_manifest, eval_clips = manifest, clips
        say(f"[{h}] corpus: {len(clips)} pre-training clips, {len(eval_clips)} probe clips")

    tcfg = cfg.trainer.build()
    enc_cfg = cfg.encoder_config()
    trained = cache / "trained" / _training_key(cfg)
    if (trained / SUMMARY_NAME).is_file():
        with stage("train"):
            for name in ("checkpoint.byck", "train_log.jsonl"):
                shutil.copyfile(trained / name, run_dir / name)
            state, _ = load_trainer(run_dir / "checkpoint.byck")
            summary = json.loads((trained / SUMMARY_NAME).read_text())
            say(f"[{h}] train: reusing cached model {trained.name}")
    else:
        features = standardizer = None
        if tcfg.hybrid:
            with stage("features"):
                raw = [extract_features(x) for x in clips]
                standardizer = fit_standardizer(raw)
                features = np.stack([standardizer.apply(v) for v in raw])

        with stage("train"):
            heads = cfg.head_config(D_SUP if tcfg.hybrid else 256)
            aug = cfg.augmentation.build(cfg.seed)
            state = init_state(enc_cfg, heads, tcfg, aug, stats, seed=cfg.seed)
            (run_dir / "train_log.jsonl").unlink(missing_ok=True)  # a rerun replaces, never appends
            history = fit(state, lms, features, tcfg, log=jsonl_logger(run_dir / "train_log.jsonl"))
            save_trainer(run_dir / "checkpoint.byck", state, enc_cfg, heads, tcfg, {"training_hash": trained.name}, standardizer)
            summary = _training_summary(history, tcfg.epochs)
            _store_trained(run_dir, trained, summary)
            say(f"[{h}] train: l_hybrid {summary['epoch_l_hybrid'][0]:.4f} -> {summary['epoch_l_hybrid'][-1]:.4f}")

    e = cfg.embedding
    with stage("extract"):
        embedded = embed_corpus(state.network.online_encoder, stats, eval_clips, e.mode, e.window_s, e.hop_s)
        records = embedded if e.mode == "scene" else [x for s in embedded for x in s.embeddings]
        write_embeddings(run_dir / "embeddings.emb1", records, e.mode)

    with stage("probe"):
        metrics = probe_metrics(cfg, eval_manifest, eval_clips, embedded)
        say(f"[{h}] probe: {metrics}")
        baseline = None
        if cfg.random_baseline:
            random_encoder = build_encoder(enc_cfg)
            random_embedded = embed_corpus(random_encoder, stats, eval_clips, e.mode, e.window_s, e.hop_s)
            baseline = probe_metrics(cfg, eval_manifest, eval_clips, random_embedded)
            say(f"[{h}] random baseline: {baseline}")

    report = {
        "config_hash": h,
        "seed": cfg.seed,
        "config": cfg.run_dict(),
        "task": e.mode,
        "metrics": metrics,
        "random_baseline": baseline,
        "training": summary,
        "artifacts": {"checkpoint": "checkpoint.byck", "embeddings": "embeddings.emb1", "train_log": "train_log.jsonl"},
    }
    path = run_dir / REPORT_NAME
    with open(path, "w") as fh:
        json.dump(_round(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def run_experiment(cfg: ExperimentConfig, log: Callable[[str], None] | None = None) -> list[Path]:
    """Expand the sweep and run every resulting config in order."""
    return [run_single(c, log) for c in expand_sweep(cfg)]
