"""Strict YAML experiment configuration.

Every section maps onto a dataclass; unknown keys at any level are errors.
A minimal file::

    seed: 0
    output_dir: runs
    corpus:
      synthetic: {task: tone_pitch_class, n_clips: 200, snr_db: -10}
    encoder: {arch: DefaultCnn, width_multiplier: 0.125}
    trainer: {batch_size: 16, epochs: 20, hybrid: true, alpha: 1, beta: 1}
    sweep:
      ratios: [[1, 4], [1, 1], [4, 1]]
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .augment import AugmentationConfig, window_to_frames
from .corpus import SyntheticTaskSpec
from .encoders import EncoderConfig
from .evaluation import ProbeConfig
from .frontend import SAMPLE_RATE
from .trainer import HeadConfig, HybridLossWeights, TrainConfig

STANDARD_RATIOS = ((1, 4), (1, 2), (2, 3), (1, 1), (3, 2), (2, 1), (4, 1))
STANDARD_WINDOWS_S = (0.5, 0.95, 1.425, 2.0)


class ConfigError(ValueError):
    pass


@dataclass
class FrontendSection:
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise ConfigError(f"frontend.sample_rate must be {SAMPLE_RATE}")


@dataclass
class CorpusSection:
    manifest: str | None = None
    synthetic: dict | None = None
    # probe corpus; defaults to the pre-training corpus
    eval_manifest: str | None = None
    eval_synthetic: dict | None = None

    def __post_init__(self):
        if (self.manifest is None) == (self.synthetic is None):
            raise ConfigError("corpus needs exactly one of 'manifest' or 'synthetic'")
        if self.eval_manifest is not None and self.eval_synthetic is not None:
            raise ConfigError("corpus accepts at most one of 'eval_manifest' or 'eval_synthetic'")
        for spec in (self.synthetic, self.eval_synthetic):
            if spec is not None:
                _strict(SyntheticTaskSpec, spec, "corpus.synthetic")


@dataclass
class AugmentationSection:
    window_s: float = 0.95
    mixup_alpha: float = 0.4
    memory_capacity: int = 2048
    freq_scale_range: list = field(default_factory=lambda: [0.6, 1.5])
    time_scale_range: list = field(default_factory=lambda: [0.6, 1.5])
    canvas_scale: float = 1.5

    def build(self, seed: int) -> AugmentationConfig:
        return AugmentationConfig(
            mixup_alpha=self.mixup_alpha,
            memory_capacity=self.memory_capacity,
            freq_scale_range=tuple(self.freq_scale_range),
            time_scale_range=tuple(self.time_scale_range),
            canvas_scale=self.canvas_scale,
            segment_frames=window_to_frames(self.window_s),
            seed=seed,
        )


@dataclass
class EncoderSection:
    arch: str = "DefaultCnn"
    width_multiplier: float = 0.125
    dropout: float = 0.3


@dataclass
class TrainerSection:
    batch_size: int = 16
    learning_rate: float = 3e-4
    epochs: int = 20
    hybrid: bool = True
    alpha: float = 1.0
    beta: float = 1.0
    symmetrize: bool = True
    normalized_mse: bool = False
    ema_decay: float = 0.99
    sup_target: str = "predictor"

    def build(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            hybrid=self.hybrid,
            weights=HybridLossWeights(self.alpha, self.beta),
            symmetrize=self.symmetrize,
            normalized_mse=self.normalized_mse,
            ema_decay=self.ema_decay,
            sup_target=self.sup_target,
        )


@dataclass
class EmbeddingSection:
    mode: str = "scene"
    window_s: float = 1.0
    hop_s: float = 0.05

    def __post_init__(self):
        if self.mode not in ("scene", "timestamp"):
            raise ConfigError("embedding.mode must be 'scene' or 'timestamp'")
        if self.window_s <= 0 or self.hop_s <= 0:
            raise ConfigError("embedding window_s and hop_s must be positive")


@dataclass
class ProbeSection:
    hidden_layers: list = field(default_factory=lambda: [512])
    learning_rate: float = 1e-3
    epochs: int = 500
    patience: int = 50
    weight_decay: float = 0.0
    thresholds: list = field(default_factory=lambda: [0.5])
    min_duration_hops: list = field(default_factory=lambda: [2])
    onset_tolerance_s: float = 0.05
    segment_s: float = 1.0

    def build(self, seed: int) -> ProbeConfig:
        return ProbeConfig(self.hidden_layers, self.learning_rate, self.epochs, seed, self.patience, self.weight_decay)


@dataclass
class SweepSection:
    ratios: list | None = None
    windows_s: list | None = None
    archs: list | None = None
    seeds: list | None = None


@dataclass
class ExperimentConfig:
    corpus: CorpusSection
    seed: int = 0
    output_dir: str = "runs"
    frontend: FrontendSection = field(default_factory=FrontendSection)
    augmentation: AugmentationSection = field(default_factory=AugmentationSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    heads: dict | None = None
    trainer: TrainerSection = field(default_factory=TrainerSection)
    embedding: EmbeddingSection = field(default_factory=EmbeddingSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    random_baseline: bool = True
    sweep: SweepSection = field(default_factory=SweepSection)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.encoder.arch, self.encoder.width_multiplier, seed=self.seed, dropout=self.encoder.dropout)

    def head_config(self, out_dim: int) -> HeadConfig:
        if self.heads is not None:
            return _strict(HeadConfig, {"projector_out": out_dim, **self.heads}, "heads")
        return HeadConfig.scaled_for(self.encoder.width_multiplier, out_dim)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def run_dict(self) -> dict:
        """Config fields that determine a single run's results (no output location, no sweep)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("sweep")
        return d

    def config_hash(self) -> str:
        return _hash(self.run_dict())

    def training_dict(self) -> dict:
        """The subset of fields that determines pre-training (not embedding, probe or eval corpus)."""
        d = self.to_dict()
        corpus = {k: d["corpus"][k] for k in ("manifest", "synthetic")}
        keep = ("seed", "frontend", "augmentation", "encoder", "heads", "trainer")
        return {"corpus": corpus, **{k: d[k] for k in keep}}

    def training_hash(self) -> str:
        return _hash(self.training_dict())


def _hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {
    "corpus": CorpusSection,
    "frontend": FrontendSection,
    "augmentation": AugmentationSection,
    "encoder": EncoderSection,
    "trainer": TrainerSection,
    "embedding": EmbeddingSection,
    "probe": ProbeSection,
    "sweep": SweepSection,
}


def _strict(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = copy.deepcopy(data)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    if "corpus" not in data:
        raise ConfigError("config requires a 'corpus' section")
    for key, cls in _SECTIONS.items():
        if key in data:
            data[key] = _strict(cls, data[key] if data[key] is not None else {}, key)
    if data.get("heads") is not None:
        _strict(HeadConfig, {"projector_out": 1, **data["heads"]}, "heads")
    cfg = ExperimentConfig(**data)
    try:
        cfg.encoder_config()  # validates arch and width
        cfg.trainer.build()
        cfg.probe.build(cfg.seed)
        cfg.augmentation.build(cfg.seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return config_from_dict(data or {})


def expand_sweep(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    """Cartesian product of the sweep axes as concrete single-run configs."""
    runs = [copy.deepcopy(cfg)]
    sw = cfg.sweep
    if sw.ratios:
        runs = [_with(r, trainer_alpha=float(a), trainer_beta=float(b)) for r in runs for a, b in sw.ratios]
    if sw.windows_s:
        runs = [_with(r, augmentation_window_s=float(w)) for r in runs for w in sw.windows_s]
    if sw.archs:
        runs = [_with(r, encoder_arch=str(a)) for r in runs for a in sw.archs]
    if sw.seeds:
        runs = [_with(r, seed=int(s)) for r in runs for s in sw.seeds]
    for r in runs:
        r.sweep = SweepSection()
    return runs


def _with(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    out = copy.deepcopy(cfg)
    for key, value in changes.items():
        if "_" in key and key.split("_", 1)[0] in _SECTIONS:
            section, attr = key.split("_", 1)
            setattr(getattr(out, section), attr, value)
        else:
            setattr(out, key, value)
    return out
