"""Scene and timestamp embeddings from a frozen encoder, plus the EMB1 file format.

EMB1 layout (little endian)::

    b"EMB1" | u32 dim | u8 mode (0 scene, 1 timestamp)
    per record: u32 id_len | id bytes (utf-8) | [f64 timestamp if mode 1] | dim x f32

A JSON-lines mirror holds one ``{"id", "timestamp", "embedding"}`` object per record.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoders import Embedding, Encoder, embed_batch
from .frontend import AudioClip, NormalizationStats, SAMPLE_RATE, FrontendError, log_mel, standardize

EMB_MAGIC = b"EMB1"
MODES = ("scene", "timestamp")


class EmbeddingError(ValueError):
    pass


@dataclass
class TimestampEmbeddingSet:
    embeddings: list
    window_s: float
    hop_s: float
    clip_id: str = ""

    def __post_init__(self):
        ts = [e.timestamp_s for e in self.embeddings]
        if any(t is None for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
            raise EmbeddingError("timestamps must be set and strictly increasing")
        if len({len(e.values) for e in self.embeddings}) > 1:
            raise EmbeddingError("embedding lengths differ")

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([e.timestamp_s for e in self.embeddings])

    def matrix(self) -> np.ndarray:
        return np.stack([e.values for e in self.embeddings])


def _check_rate(clip: AudioClip) -> None:
    if clip.sample_rate != SAMPLE_RATE:
        raise EmbeddingError(f"clip must be resampled to {SAMPLE_RATE} Hz first")


def scene_embedding(clip: AudioClip, encoder: Encoder, stats: NormalizationStats) -> Embedding:
    """Embed the whole clip: log-mel, dataset standardization, inference-mode encoder."""
    _check_rate(clip)
    try:
        lms = standardize(log_mel(clip), stats)
    except FrontendError as exc:
        raise EmbeddingError(str(exc)) from None
    if lms.n_frames < 8:
        raise EmbeddingError("clip too short for encoder")
    return Embedding(embed_batch(encoder, lms.values[None])[0], clip.id)


def window_grid(n_samples: int, window_s: float, hop_s: float) -> tuple[int, int, int]:
    """``(n_windows, window_samples, hop_samples)`` for a clip of ``n_samples``."""
    if window_s <= 0 or hop_s <= 0:
        raise EmbeddingError("window_s and hop_s must be positive")
    win = int(round(window_s * SAMPLE_RATE))
    hop = int(round(hop_s * SAMPLE_RATE))
    if hop < 1 or win < 1:
        raise EmbeddingError("window or hop shorter than one sample")
    return n_samples // hop + 1, win, hop


def timestamp_embeddings(
    clip: AudioClip,
    encoder: Encoder,
    stats: NormalizationStats,
    window_s: float = 1.0,
    hop_s: float = 0.05,
    batch_size: int = 64,
) -> TimestampEmbeddingSet:
    """Embed centered windows ``[i*hop - window/2, i*hop + window/2)`` for ``i = 0 .. floor(duration / hop)``.

    The clip is zero padded by half a window on each side, so every window is valid.
    """
    _check_rate(clip)
    n_windows, win, hop = window_grid(len(clip.samples), window_s, hop_s)
    half = win // 2
    padded = np.concatenate([np.zeros(half), clip.samples, np.zeros(win - half + hop)])
    specs = []
    for i in range(n_windows):
        seg = AudioClip(padded[i * hop : i * hop + win], SAMPLE_RATE, clip.id)
        specs.append(standardize(log_mel(seg), stats).values)
    if specs[0].shape[1] < 8:
        raise EmbeddingError("window too short for encoder")
    out = []
    for start in range(0, n_windows, batch_size):
        out.append(embed_batch(encoder, np.stack(specs[start : start + batch_size])))
    values = np.concatenate(out)
    embs = [Embedding(values[i], clip.id, i * hop_s) for i in range(n_windows)]
    return TimestampEmbeddingSet(embs, window_s, hop_s, clip.id)


# ---------------------------------------------------------------------------
# EMB1 I/O


def embeddings_to_bytes(records: Sequence[Embedding], mode: str) -> bytes:
    if mode not in MODES:
        raise EmbeddingError(f"mode must be one of {MODES}")
    if not records:
        raise EmbeddingError("no embeddings to write")
    dim = len(records[0].values)
    parts = [EMB_MAGIC, struct.pack("<IB", dim, MODES.index(mode))]
    for e in records:
        if len(e.values) != dim:
            raise EmbeddingError("embedding lengths differ")
        ident = e.source_id.encode("utf-8")
        parts.append(struct.pack("<I", len(ident)) + ident)
        if mode == "timestamp":
            if e.timestamp_s is None:
                raise EmbeddingError("timestamp mode requires timestamp_s")
            parts.append(struct.pack("<d", e.timestamp_s))
        parts.append(np.asarray(e.values, dtype="<f4").tobytes())
    return b"".join(parts)


def embeddings_from_bytes(blob: bytes) -> tuple[str, list[Embedding]]:
    if blob[:4] != EMB_MAGIC or len(blob) < 9:
        raise EmbeddingError("not an EMB1 file")
    dim, mode_id = struct.unpack("<IB", blob[4:9])
    if mode_id >= len(MODES):
        raise EmbeddingError("unknown EMB1 mode")
    mode = MODES[mode_id]
    pos, out = 9, []
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            ident = blob[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            ts = None
            if mode == "timestamp":
                (ts,) = struct.unpack_from("<d", blob, pos)
                pos += 8
            if pos + 4 * dim > len(blob):
                raise EmbeddingError("truncated EMB1 file")
            vals = np.frombuffer(blob, dtype="<f4", count=dim, offset=pos).astype(np.float64)
            pos += 4 * dim
            out.append(Embedding(vals, ident, ts))
    except struct.error:
        raise EmbeddingError("truncated EMB1 file") from None
    return mode, out


def write_embeddings(path: str | Path, records: Sequence[Embedding], mode: str, jsonl: bool = True) -> None:
    """Write EMB1 to ``path`` and (optionally) a ``.jsonl`` mirror next to it."""
    path = Path(path)
    path.write_bytes(embeddings_to_bytes(records, mode))
    if jsonl:
        with open(path.with_suffix(".jsonl"), "w") as fh:
            for e in records:
                fh.write(json.dumps({
                    "id": e.source_id,
                    "timestamp": e.timestamp_s,
                    "embedding": [float(v) for v in np.asarray(e.values, dtype=np.float32)],
                }) + "\n")


def read_embeddings(path: str | Path) -> tuple[str, list[Embedding]]:
    return embeddings_from_bytes(Path(path).read_bytes())


def group_by_clip(records: Iterable[Embedding]) -> dict:
    out: dict = {}
    for e in records:
        out.setdefault(e.source_id, []).append(e)
    return out
