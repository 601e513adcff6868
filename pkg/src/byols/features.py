"""Handcrafted DSP features used as the supervision target of hybrid training.

A reduced, fully deterministic stand-in for a large acoustic functional set:
20 frame-level low-level descriptors (LLDs) plus their deltas, each summarized
by 12 statistical functionals, giving a 480-dimensional vector.

Canonical ordering: for every LLD row (the 20 base LLDs, then their deltas in
the same order) all 12 functionals in :data:`FUNCTIONAL_NAMES` order. Feature
``k`` is named ``f"{lld}__{functional}"``.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.fft import dct

from .frontend import (
    AudioClip,
    HOP_LENGTH,
    LOG_FLOOR,
    N_FFT,
    SAMPLE_RATE,
    STD_FLOOR,
    WIN_LENGTH,
    analysis_window,
    mel_filterbank,
)

N_MFCC = 13
F0_MIN_HZ = 60.0
F0_MAX_HZ = 500.0
VOICING_THRESHOLD = 0.45
ROLLOFF = 0.85
DELTA_WIDTH = 2

BASE_LLD_NAMES = (
    [f"mfcc{i}" for i in range(N_MFCC)]
    + ["log_energy", "zcr", "f0", "voicing_prob", "spectral_centroid", "spectral_flux", "spectral_rolloff85"]
)
LLD_NAMES = BASE_LLD_NAMES + [f"{n}_delta" for n in BASE_LLD_NAMES]
FUNCTIONAL_NAMES = [
    "mean", "std", "min", "max", "range", "skewness", "kurtosis",
    "pct25", "pct50", "pct75", "slope", "offset",
]
FEATURE_NAMES = [f"{lld}__{fn}" for lld in LLD_NAMES for fn in FUNCTIONAL_NAMES]
D_SUP = len(FEATURE_NAMES)  # 480

HCF_MAGIC = b"HCF1"


class FeatureError(ValueError):
    pass


@dataclass
class LldFrameMatrix:
    values: np.ndarray
    lld_names: list

    def __post_init__(self):
        if self.values.shape[0] != len(self.lld_names):
            raise FeatureError("row count must match lld_names")


@dataclass
class HandcraftedFeatureVector:
    values: np.ndarray
    feature_names: list

    def __len__(self):
        return len(self.values)


def _frames(x: np.ndarray) -> np.ndarray:
    n = 1 + (len(x) - WIN_LENGTH) // HOP_LENGTH
    return np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH][:n]


def normalized_autocorrelation(frames: np.ndarray, lags) -> np.ndarray:
    """Normalized autocorrelation of each (mean-removed) frame at ``lags``, shape ``(n_frames, len(lags))``."""
    frames = frames - frames.mean(axis=1, keepdims=True)
    n = frames.shape[1]
    out = np.zeros((frames.shape[0], len(lags)))
    for j, k in enumerate(lags):
        a, b = frames[:, : n - k], frames[:, k:]
        den = np.sqrt(np.einsum("ij,ij->i", a, a) * np.einsum("ij,ij->i", b, b))
        num = np.einsum("ij,ij->i", a, b)
        out[:, j] = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return out


def f0_autocorr(frames: np.ndarray, sr: int = SAMPLE_RATE) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame F0 (Hz, 0 if unvoiced) and voicing probability.

    The pitch lag is the first local maximum of the normalized autocorrelation
    reaching 90% of the global peak in the 60-500 Hz range (guards against
    octave errors), refined by parabolic interpolation. Frames whose peak stays
    below the voicing threshold are unvoiced.
    """
    lag_min = int(np.floor(sr / F0_MAX_HZ))
    lag_max = min(int(np.ceil(sr / F0_MIN_HZ)), frames.shape[1] - 2)
    lags = np.arange(lag_min - 1, lag_max + 2)
    r = normalized_autocorrelation(frames, lags)
    inner = r[:, 1:-1]
    peak = inner.max(axis=1)
    voicing = np.clip(peak, 0.0, 1.0)
    f0 = np.zeros(frames.shape[0])
    for i in np.flatnonzero(peak >= VOICING_THRESHOLD):
        row = r[i]
        is_peak = (row[1:-1] >= row[:-2]) & (row[1:-1] >= row[2:]) & (row[1:-1] >= 0.9 * peak[i])
        cands = np.flatnonzero(is_peak)
        j = (cands[0] if cands.size else int(np.argmax(inner[i]))) + 1
        y0, y1, y2 = row[j - 1], row[j], row[j + 1]
        denom = y0 - 2 * y1 + y2
        shift = float(np.clip(0.5 * (y0 - y2) / denom, -0.5, 0.5)) if denom != 0 else 0.0
        f0[i] = sr / (lags[j] + shift)
    return f0, voicing


def delta(x: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Regression deltas along the last axis with edge replication."""
    t = x.shape[-1]
    padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(width, width)], mode="edge")
    num = sum(k * (padded[..., width + k : width + k + t] - padded[..., width - k : width - k + t]) for k in range(1, width + 1))
    return num / (2 * sum(k * k for k in range(1, width + 1)))


_MEL = mel_filterbank()


def extract_llds(clip: AudioClip) -> LldFrameMatrix:
    """Frame-level descriptors (25 ms / 10 ms, no centering) and their deltas: 40 rows."""
    if clip.sample_rate != SAMPLE_RATE:
        raise FeatureError(f"expected {SAMPLE_RATE} Hz audio")
    x = clip.samples
    if len(x) < WIN_LENGTH + 2 * HOP_LENGTH:
        raise FeatureError("clip too short for feature extraction (need >= 3 frames)")
    frames = _frames(x)
    n_frames = frames.shape[0]

    padded = np.zeros((n_frames, N_FFT))
    left = (N_FFT - WIN_LENGTH) // 2
    padded[:, left : left + WIN_LENGTH] = frames
    mag = np.abs(np.fft.rfft(padded * analysis_window(), axis=1))
    power = mag**2
    freqs = np.fft.rfftfreq(N_FFT, 1.0 / SAMPLE_RATE)

    log_mel_power = np.log(power @ _MEL.T + LOG_FLOOR)
    mfcc = dct(log_mel_power, type=2, norm="ortho", axis=1)[:, :N_MFCC]

    rms = np.sqrt(np.mean(frames**2, axis=1))
    log_energy = np.log(np.maximum(rms, LOG_FLOOR))

    signs = np.sign(frames)
    zcr = np.mean(signs[:, 1:] != signs[:, :-1], axis=1)

    f0, voicing = f0_autocorr(frames)

    mag_sum = mag.sum(axis=1)
    safe = np.where(mag_sum > 0, mag_sum, 1.0)
    centroid = np.where(mag_sum > 0, (mag @ freqs) / safe, 0.0)

    norm_mag = mag / safe[:, None]
    flux = np.zeros(n_frames)
    flux[1:] = np.sqrt(np.sum(np.diff(norm_mag, axis=0) ** 2, axis=1))

    cum = np.cumsum(power, axis=1)
    total = cum[:, -1]
    idx = np.argmax(cum >= ROLLOFF * total[:, None], axis=1)
    rolloff = np.where(total > 0, freqs[idx], 0.0)

    base = np.vstack([mfcc.T, log_energy, zcr, f0, voicing, centroid, flux, rolloff])
    return LldFrameMatrix(np.vstack([base, delta(base)]), list(LLD_NAMES))


def _functionals(row: np.ndarray) -> list[float]:
    n = row.size
    lo, hi = row.min(), row.max()
    if lo == hi:
        return [lo, 0.0, lo, hi, 0.0, 0.0, 0.0, lo, lo, lo, 0.0, lo]
    mean = row.mean()
    centered = row - mean
    m2 = np.mean(centered**2)
    std = np.sqrt(m2)
    if m2 > 0:
        skew = np.mean(centered**3) / m2**1.5
        kurt = np.mean(centered**4) / m2**2
    else:
        skew = kurt = 0.0
    p25, p50, p75 = np.percentile(row, [25, 50, 75])
    i = np.arange(n, dtype=np.float64)
    i_c = i - i.mean()
    slope = np.dot(i_c, centered) / np.dot(i_c, i_c)
    offset = mean - slope * i.mean()
    return [mean, std, lo, hi, hi - lo, skew, kurt, p25, p50, p75, slope, offset]


def apply_functionals(llds: LldFrameMatrix) -> HandcraftedFeatureVector:
    """Summarize every LLD row with 12 functionals (population moments, linear percentiles).

    Kurtosis is the non-excess ratio ``m4 / m2**2``; skewness and kurtosis are 0
    for constant rows. Slope/offset come from least squares over frame index.
    """
    if llds.values.shape[1] < 2:
        raise FeatureError("need at least 2 frames")
    vals = np.array([_functionals(row) for row in llds.values], dtype=np.float64).ravel()
    names = [f"{lld}__{fn}" for lld in llds.lld_names for fn in FUNCTIONAL_NAMES]
    return HandcraftedFeatureVector(vals, names)


def extract_features(clip: AudioClip) -> HandcraftedFeatureVector:
    return apply_functionals(extract_llds(clip))


@dataclass(frozen=True)
class FeatureStandardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x) -> np.ndarray:
        v = x.values if isinstance(x, HandcraftedFeatureVector) else np.asarray(x, dtype=np.float64)
        return (v - self.mean) / self.std


def fit_standardizer(corpus: Sequence[HandcraftedFeatureVector]) -> FeatureStandardizer:
    if len(corpus) == 0:
        raise FeatureError("cannot fit a standardizer on an empty corpus")
    m = np.stack([np.asarray(v.values if isinstance(v, HandcraftedFeatureVector) else v) for v in corpus])
    return FeatureStandardizer(m.mean(axis=0), np.maximum(m.std(axis=0), STD_FLOOR))


def features_to_bytes(vec: HandcraftedFeatureVector) -> bytes:
    """``HCF1`` blob: magic, u32 D, D little-endian f32 values."""
    return HCF_MAGIC + struct.pack("<I", len(vec.values)) + np.asarray(vec.values, dtype="<f4").tobytes()


def features_from_bytes(blob: bytes) -> HandcraftedFeatureVector:
    if blob[:4] != HCF_MAGIC:
        raise FeatureError("not an HCF1 blob")
    (d,) = struct.unpack("<I", blob[4:8])
    if len(blob) != 8 + 4 * d:
        raise FeatureError("truncated HCF1 blob")
    vals = np.frombuffer(blob, dtype="<f4", offset=8).astype(np.float64)
    names = FEATURE_NAMES if d == D_SUP else [f"f{i}" for i in range(d)]
    return HandcraftedFeatureVector(vals, list(names))


def features_to_csv(rows: Sequence[tuple[str, HandcraftedFeatureVector]]) -> str:
    """CSV with header ``id`` + canonical feature names, one row per clip."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id"] + FEATURE_NAMES)
    for clip_id, vec in rows:
        w.writerow([clip_id] + [repr(float(v)) for v in vec.values])
    return buf.getvalue()
