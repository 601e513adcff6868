"""Corpus manifests, event annotations and seeded synthetic task generation.

Manifest CSV schema (UTF-8, comma separated, header required)::

    path,id,label,events,split

* ``path``   audio file, relative paths resolve against the manifest directory
* ``id``     unique clip identifier
* ``label``  optional scene label (string)
* ``events`` optional path to a JSON-lines event annotation file
* ``split``  optional ``train`` / ``val`` / ``test``

Only ``path`` and ``id`` are mandatory columns. Event annotation files hold
one JSON object per line: ``{"onset": <s>, "offset": <s>, "label": <str>}``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .frontend import AudioClip, SAMPLE_RATE, write_wav

MANIFEST_VERSION = 1
GENERATOR_VERSION = 2  # bump whenever synthetic audio changes for a given spec
TASKS = ("tone_pitch_class", "chord_chroma", "noise_vs_tone", "event_onsets")
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    onset: float
    offset: float
    label: str

    def __post_init__(self):
        if not (np.isfinite(self.onset) and np.isfinite(self.offset)) or self.onset > self.offset:
            raise ValueError(f"invalid event {self}")


@dataclass
class ManifestRecord:
    path: Path
    id: str
    label: str | None = None
    events: list[Event] | None = None
    split: str | None = None


@dataclass
class CorpusManifest:
    records: list[ManifestRecord]
    format_version: int = MANIFEST_VERSION

    def __len__(self):
        return len(self.records)

    def labels(self) -> list[str]:
        return sorted({r.label for r in self.records if r.label is not None})

    def event_labels(self) -> list[str]:
        return sorted({e.label for r in self.records for e in (r.events or [])})


def read_events(path: str | Path) -> list[Event]:
    events = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                events.append(Event(float(obj["onset"]), float(obj["offset"]), str(obj["label"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed event ({exc})") from None
    return sorted(events, key=lambda e: (e.onset, e.offset, e.label))


def write_events(path: str | Path, events: Sequence[Event]) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps({"onset": round(e.onset, 6), "offset": round(e.offset, 6), "label": e.label}) + "\n")


def load_manifest(path: str | Path, check_files: bool = True) -> CorpusManifest:
    """Parse and validate a manifest CSV; errors name the offending line."""
    path = Path(path)
    base = path.parent
    with open(path, newline="") as fh:
        text = fh.read()
    if not text.strip():
        raise ManifestError("empty manifest")
    reader = csv.DictReader(text.splitlines())
    cols = reader.fieldnames or []
    missing = {"path", "id"} - set(cols)
    if missing:
        raise ManifestError(f"line 1: missing column(s) {sorted(missing)}")
    unknown = set(cols) - {"path", "id", "label", "events", "split"}
    if unknown:
        raise ManifestError(f"line 1: unknown column(s) {sorted(unknown)}")
    records = []
    seen = set()
    for lineno, row in enumerate(reader, 2):
        if None in row or any(v is None for v in row.values()):
            raise ManifestError(f"line {lineno}: malformed row")
        clip_id = row["id"].strip()
        if not clip_id or not row["path"].strip():
            raise ManifestError(f"line {lineno}: empty path or id")
        if clip_id in seen:
            raise ManifestError(f"line {lineno}: duplicate id {clip_id!r}")
        seen.add(clip_id)
        audio = (base / row["path"].strip()).resolve()
        if check_files and not audio.is_file():
            raise ManifestError(f"line {lineno}: missing file {audio}")
        events = None
        if row.get("events", "").strip():
            ev_path = (base / row["events"].strip()).resolve()
            if check_files and not ev_path.is_file():
                raise ManifestError(f"line {lineno}: missing event file {ev_path}")
            events = read_events(ev_path) if ev_path.is_file() else []
        split = row.get("split", "").strip() or None
        if split is not None and split not in SPLITS:
            raise ManifestError(f"line {lineno}: unknown split {split!r}")
        label = row.get("label", "").strip() or None
        records.append(ManifestRecord(audio, clip_id, label, events, split))
    if not records:
        raise ManifestError("empty manifest")
    return CorpusManifest(records)


def write_manifest(path: str | Path, manifest: CorpusManifest, event_paths: dict | None = None) -> None:
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "id", "label", "events", "split"])
        for r in manifest.records:
            ev = ""
            if event_paths and r.id in event_paths:
                ev = str(Path(event_paths[r.id]).resolve().relative_to(base))
            w.writerow([str(Path(r.path).resolve().relative_to(base)), r.id, r.label or "", ev, r.split or ""])


# ---------------------------------------------------------------------------
# Synthetic tasks


@dataclass
class SyntheticTaskSpec:
    task: str = "tone_pitch_class"
    n_clips: int = 200
    clip_s: float = 1.0
    n_classes: int = 4
    snr_db: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.clip_s <= 0 or self.n_clips < 1:
            raise ValueError("clip_s and n_clips must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _harmonic_tone(f0: float, n: int, rng: np.random.Generator, n_harm: int = 4) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    amps = rng.uniform(0.2, 1.0, n_harm)
    amps[0] = 1.0
    x = np.zeros(n)
    for h in range(1, n_harm + 1):
        if f0 * h < SAMPLE_RATE / 2 - 500:
            x += amps[h - 1] * np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi)) / h
    return x


def _add_noise(x: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    p_sig = np.mean(x**2)
    noise = rng.standard_normal(len(x))
    return x + noise * np.sqrt(p_sig / 10 ** (snr_db / 10.0))


def _normalize(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    peak = np.max(np.abs(x))
    return x / peak * rng.uniform(0.3, 0.9) if peak > 0 else x


def _fade(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    r = min(ramp, n // 2)
    if r > 0:
        env[:r] = np.linspace(0.0, 1.0, r, endpoint=False)
        env[n - r :] = np.linspace(1.0, 0.0, r)
    return env


def class_frequency(task: str, k: int) -> float:
    """Fundamental (Hz) tagging class ``k``."""
    if task == "event_onsets":
        return 300.0 * 2 ** (k * 7 / 12)
    return 220.0 * 2 ** (k / 12)


def _event_clip(spec: SyntheticTaskSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, list[Event]]:
    x = np.zeros(n)
    events: list[Event] = []
    t = 0.2 + rng.uniform(0.0, 0.3)
    while True:
        dur = rng.uniform(0.6, 1.2)
        if t + dur > spec.clip_s - 0.1:
            break
        k = int(rng.integers(spec.n_classes))
        start = int(round(t * 100)) * SAMPLE_RATE // 100  # onsets on the 10 ms grid
        stop = start + int(round(dur * 100)) * SAMPLE_RATE // 100
        burst = _harmonic_tone(class_frequency(spec.task, k), stop - start, rng) * _fade(stop - start, 80)
        x[start:stop] += 0.5 * burst / np.max(np.abs(burst))
        events.append(Event(start / SAMPLE_RATE, stop / SAMPLE_RATE, f"c{k}"))
        # gaps above half of a 1 s analysis window keep same-class bursts separable
        t = stop / SAMPLE_RATE + rng.uniform(0.6, 1.0)
    noise_rms = 0.5 / np.sqrt(2) / 10 ** (spec.snr_db / 20.0)
    x += noise_rms * rng.standard_normal(n)
    return x, events


def synthesize_clip(spec: SyntheticTaskSpec, k: int, rng: np.random.Generator) -> np.ndarray:
    n = int(round(spec.clip_s * SAMPLE_RATE))
    if spec.task == "tone_pitch_class":
        f0 = class_frequency(spec.task, k) * 2 ** (rng.uniform(-0.25, 0.25) / 12)
        f0 *= 2 ** int(rng.integers(0, 2))  # random octave: class is the pitch class
        x = _add_noise(_harmonic_tone(f0, n, rng), spec.snr_db, rng)
    elif spec.task == "chord_chroma":
        root = 130.81 * 2 ** (k / 12) * 2 ** int(rng.integers(0, 2))
        x = sum(_harmonic_tone(root * 2 ** (s / 12), n, rng) for s in (0, 4, 7))
        x = _add_noise(x, spec.snr_db, rng)
    elif spec.task == "noise_vs_tone":
        if k % 2 == 0:
            x = rng.standard_normal(n)
        else:
            x = _add_noise(_harmonic_tone(rng.uniform(100, 1000), n, rng), spec.snr_db, rng)
    else:
        raise ValueError("event clips are built by _event_clip")
    return _normalize(x, rng)


def generate_synthetic_corpus(spec: SyntheticTaskSpec, out_dir: str | Path) -> Path:
    """Write WAVs (+ event JSON-lines for ``event_onsets``) and a manifest; returns the manifest path.

    Scene tasks are class balanced: clip ``i`` belongs to class ``i % n_classes``.
    Splits are assigned 60/20/20 per class.
    """
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    records = []
    event_paths = {}
    n = int(round(spec.clip_s * SAMPLE_RATE))
    for i in range(spec.n_clips):
        clip_id = f"{spec.task}_{i:05d}"
        wav = out / "audio" / f"{clip_id}.wav"
        rank = i // spec.n_classes
        per_class = -(-spec.n_clips // spec.n_classes)
        frac = rank / per_class
        split = "train" if frac < 0.6 else ("val" if frac < 0.8 else "test")
        if spec.task == "event_onsets":
            x, events = _event_clip(spec, n, rng)
            ev_path = out / "audio" / f"{clip_id}.events.jsonl"
            write_events(ev_path, events)
            event_paths[clip_id] = ev_path
            frac = i / spec.n_clips
            split = "train" if frac < 0.6 else ("val" if frac < 0.8 else "test")
            records.append(ManifestRecord(wav, clip_id, None, events, split))
        else:
            k = i % spec.n_classes
            x = synthesize_clip(spec, k, rng)
            records.append(ManifestRecord(wav, clip_id, f"c{k}", None, split))
        write_wav(wav, AudioClip(np.clip(x, -1.0, 1.0), SAMPLE_RATE, clip_id))
    manifest_path = out / "manifest.csv"
    write_manifest(manifest_path, CorpusManifest(records), event_paths)
    with open(out / "synth_spec.json", "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
    return manifest_path
