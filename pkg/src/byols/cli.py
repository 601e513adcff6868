"""Command line entry point: ``byols <subcommand>``.

Failures exit nonzero and print one JSON object to stderr::

    {"error": "<code>", "message": "..."}
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_CODES = {
    "config_error": 2,
    "manifest_error": 3,
    "checkpoint_error": 4,
    "frontend_error": 5,
    "feature_error": 6,
    "embedding_error": 7,
    "evaluation_error": 8,
    "cka_error": 9,
    "training_error": 10,
    "stage_error": 11,
    "io_error": 12,
    "invalid_argument": 13,
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _error_code(exc: BaseException) -> str:
    from .checkpoint import CheckpointError
    from .cka import CkaError
    from .config import ConfigError
    from .corpus import ManifestError
    from .embeddings import EmbeddingError
    from .evaluation import EvaluationError
    from .experiment import ExperimentError
    from .features import FeatureError
    from .frontend import FrontendError
    from .trainer import TrainingError

    for cls, code in (
        (ConfigError, "config_error"),
        (ManifestError, "manifest_error"),
        (CheckpointError, "checkpoint_error"),
        (FrontendError, "frontend_error"),
        (FeatureError, "feature_error"),
        (EmbeddingError, "embedding_error"),
        (EvaluationError, "evaluation_error"),
        (CkaError, "cka_error"),
        (TrainingError, "training_error"),
        (ExperimentError, "stage_error"),
        (OSError, "io_error"),
    ):
        if isinstance(exc, cls):
            return code
    return "invalid_argument"


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> None:
    from .corpus import SyntheticTaskSpec, generate_synthetic_corpus

    spec = SyntheticTaskSpec(args.task, args.n_clips, args.clip_s, args.n_classes, args.snr_db, args.seed)
    _print({"manifest": str(generate_synthetic_corpus(spec, args.out))})


def cmd_features(args) -> None:
    from .corpus import load_manifest
    from .experiment import load_clips
    from .features import extract_features, features_to_bytes, features_to_csv
    from .frontend import SAMPLE_RATE, read_wav, resample

    if args.manifest:
        manifest = load_manifest(args.manifest)
        clips = load_clips(manifest)
    elif args.wav:
        clips = []
        for p in args.wav:
            c = read_wav(p)
            clips.append(c if c.sample_rate == SAMPLE_RATE else resample(c, SAMPLE_RATE))
    else:
        raise CliError("invalid_argument", "features needs --wav or --manifest")
    rows = [(c.id, extract_features(c)) for c in clips]
    out = Path(args.out)
    if args.format == "csv":
        out.write_text(features_to_csv(rows))
    else:
        out.mkdir(parents=True, exist_ok=True)
        for clip_id, vec in rows:
            (out / f"{clip_id}.hcf").write_bytes(features_to_bytes(vec))
    _print({"clips": len(rows), "out": str(out)})


def cmd_train(args) -> None:
    from .checkpoint import load_trainer, save_trainer
    from .config import load_config
    from .corpus import load_manifest
    from .experiment import load_clips
    from .features import D_SUP, extract_features, fit_standardizer
    from .frontend import compute_stats, log_mel
    from .trainer import fit, init_state, jsonl_logger

    cfg = load_config(args.config)
    manifest = load_manifest(args.corpus)
    clips = load_clips(manifest)
    lms = [log_mel(c) for c in clips]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    features = standardizer = None
    if args.resume:
        state, loaded = load_trainer(args.resume)
        enc_cfg, heads, tcfg = loaded["encoder"], loaded["heads"], loaded["trainer"]
        standardizer = loaded.get("feature_standardizer")
        remaining = max(0, tcfg.epochs - state.epoch)
    else:
        tcfg = cfg.trainer.build()
        enc_cfg = cfg.encoder_config()
        heads = cfg.head_config(D_SUP if tcfg.hybrid else 256)
        state = init_state(enc_cfg, heads, tcfg, cfg.augmentation.build(cfg.seed), compute_stats(lms), seed=cfg.seed)
        remaining = tcfg.epochs
    if tcfg.hybrid:
        raw = [extract_features(c) for c in clips]
        standardizer = standardizer or fit_standardizer(raw)
        features = np.stack([standardizer.apply(v) for v in raw])
    fit(state, lms, features, tcfg, epochs=remaining, log=jsonl_logger(out / "train_log.jsonl"))
    ckpt = out / "checkpoint.byck"
    save_trainer(ckpt, state, enc_cfg, heads, tcfg, {"config_hash": cfg.config_hash()}, standardizer)
    _print({"checkpoint": str(ckpt), "epoch": state.epoch, "step": state.step})


def cmd_extract(args) -> None:
    from .checkpoint import load_encoder
    from .corpus import load_manifest
    from .embeddings import write_embeddings
    from .experiment import embed_corpus, load_clips

    encoder, stats, _ = load_encoder(args.ckpt)
    clips = load_clips(load_manifest(args.manifest))
    embedded = embed_corpus(encoder, stats, clips, args.mode, args.window_s, args.hop_s)
    records = embedded if args.mode == "scene" else [x for s in embedded for x in s.embeddings]
    write_embeddings(args.out, records, args.mode)
    _print({"records": len(records), "dim": len(records[0].values), "out": str(args.out)})


def cmd_probe(args) -> None:
    from .corpus import load_manifest
    from .embeddings import group_by_clip, read_embeddings
    from .evaluation import EventClip, ProbeConfig, event_probe_metrics, scene_probe_metrics
    from .experiment import load_clips

    records, modes = [], set()
    for path in args.embeddings:
        mode, recs = read_embeddings(path)
        modes.add(mode)
        records.extend(recs)
    if modes != {args.task}:
        raise CliError("invalid_argument", f"--task {args.task} does not match embedding mode(s) {sorted(modes)}")
    manifest = load_manifest(args.labels)
    by_clip = group_by_clip(records)
    missing = [r.id for r in manifest.records if r.id not in by_clip]
    if missing:
        raise CliError("evaluation_error", f"no embeddings for clip(s) {missing[:5]}")
    pcfg = ProbeConfig(args.hidden, args.lr, args.epochs, args.seed, args.patience)
    splits = [r.split for r in manifest.records]
    if mode == "scene":
        x = np.stack([by_clip[r.id][0].values for r in manifest.records])
        metrics = scene_probe_metrics(x, [r.label for r in manifest.records], splits, pcfg)
    else:
        clips = load_clips(manifest)
        event_clips = [
            EventClip(
                np.array([e.timestamp_s for e in by_clip[r.id]]),
                np.stack([e.values for e in by_clip[r.id]]),
                list(r.events or []),
                c.duration,
                r.split,
            )
            for r, c in zip(manifest.records, clips)
        ]
        metrics = event_probe_metrics(
            event_clips, manifest.event_labels(), pcfg, args.thresholds, args.min_duration_hops, args.tolerance_s
        )
    report = {"task": mode, "metrics": metrics, "config": pcfg.to_dict(), "seed": args.seed}
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _print(report)


def cmd_cka(args) -> None:
    from .checkpoint import load_encoder
    from .cka import model_similarity, plot_matrix, probe_batch, write_matrix_csv, write_matrix_json
    from .corpus import load_manifest
    from .experiment import load_clips

    enc_a, stats_a, _ = load_encoder(args.ckpt_a)
    enc_b, stats_b, _ = load_encoder(args.ckpt_b)
    clips = load_clips(load_manifest(args.manifest))
    m = model_similarity(enc_a, enc_b, probe_batch(clips, stats_a, args.frames), probe_batch(clips, stats_b, args.frames))
    write_matrix_json(args.out, m)
    if args.csv:
        write_matrix_csv(args.csv, m)
    if args.plot:
        plot_matrix(args.plot, m)
    _print({"out": str(args.out), "shape": list(m.values.shape)})


def cmd_run(args) -> None:
    from .config import load_config
    from .experiment import run_experiment

    cfg = load_config(args.config)
    if args.out:
        cfg.output_dir = args.out
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    _print({"reports": [str(p) for p in run_experiment(cfg, log)]})


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="byols", description="Hybrid bootstrap audio representations at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a seeded synthetic corpus")
    s.add_argument("--task", default="tone_pitch_class")
    s.add_argument("--n-clips", type=int, default=200)
    s.add_argument("--clip-s", type=float, default=1.0)
    s.add_argument("--n-classes", type=int, default=4)
    s.add_argument("--snr-db", type=float, default=10.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("features", help="handcrafted feature vectors (CSV or HCF1 files)")
    s.add_argument("--wav", nargs="+")
    s.add_argument("--manifest")
    s.add_argument("--format", choices=("csv", "hcf1"), default="csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", help="train a model on a corpus")
    s.add_argument("--config", required=True)
    s.add_argument("--corpus", required=True, help="manifest CSV")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("extract", help="scene or timestamp embeddings (EMB1 + JSON lines)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", choices=("scene", "timestamp"), default="scene")
    s.add_argument("--window-s", type=float, default=1.0)
    s.add_argument("--hop-s", type=float, default=0.05)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("probe", help="train and score a shallow probe on stored embeddings")
    s.add_argument("--embeddings", required=True, nargs="+", help="one or more EMB1 files")
    s.add_argument("--labels", required=True, help="manifest with labels/events and splits")
    s.add_argument("--task", choices=("scene", "timestamp"), required=True)
    s.add_argument("--hidden", type=int, nargs="*", default=[512], help="hidden widths (none for a linear probe)")
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--epochs", type=int, default=500)
    s.add_argument("--patience", type=int, default=50)
    s.add_argument("--thresholds", type=float, nargs="+", default=[0.5])
    s.add_argument("--min-duration-hops", type=int, nargs="+", default=[2])
    s.add_argument("--tolerance-s", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("cka", help="layer-wise linear CKA between two checkpoints")
    s.add_argument("--ckpt-a", required=True)
    s.add_argument("--ckpt-b", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--frames", type=int, default=96, help="crop or tile every probe clip to this many frames")
    s.add_argument("--out", required=True)
    s.add_argument("--csv")
    s.add_argument("--plot", help="PNG heatmap path")
    s.set_defaults(func=cmd_cka)

    s = sub.add_parser("run", help="full experiment (train, extract, probe, report) from a config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="override output_dir")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except Exception as exc:  # every failure becomes a machine-readable error
        code, msg = _error_code(exc), str(exc)
    else:
        return 0
    print(json.dumps({"error": code, "message": msg}), file=sys.stderr)
    return EXIT_CODES[code]


if __name__ == "__main__":
    sys.exit(main())
