"""Two-view spectrogram augmentation: shared random crop, log-mixup, random resize crop."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np

from .frontend import LogMelSpectrogram, NormalizationStats, standardize, self_stats

# standard pre-training windows and their segment lengths in frames
STANDARD_WINDOW_FRAMES = {0.5: 50, 0.95: 96, 1.425: 143, 2.0: 200}


def window_to_frames(window_s: float) -> int:
    """Training window (seconds) to LMS segment length (frames).

    The four standard pre-training windows map through a fixed table
    (0.95 s is the canonical 96-frame segment); any other window uses
    ``round(window_s / 0.010)`` with halves rounded up.
    """
    for w, frames in STANDARD_WINDOW_FRAMES.items():
        if abs(window_s - w) < 1e-9:
            return frames
    if window_s <= 0:
        raise ValueError("window must be positive")
    return max(1, int(np.floor(window_s / 0.010 + 0.5)))


@dataclass
class AugmentationConfig:
    mixup_alpha: float = 0.4
    memory_capacity: int = 2048
    freq_scale_range: tuple[float, float] = (0.6, 1.5)
    time_scale_range: tuple[float, float] = (0.6, 1.5)
    canvas_scale: float = 1.5
    segment_frames: int = 96
    seed: int = 0

    def __post_init__(self):
        self.freq_scale_range = tuple(float(v) for v in self.freq_scale_range)
        self.time_scale_range = tuple(float(v) for v in self.time_scale_range)
        if not 0.0 <= self.mixup_alpha <= 1.0:
            raise ValueError("mixup_alpha must be in [0, 1]")
        for lo, hi in (self.freq_scale_range, self.time_scale_range):
            if not 0 < lo <= hi:
                raise ValueError("scale ranges need 0 < lo <= hi")
        if self.segment_frames < 1:
            raise ValueError("segment_frames must be >= 1")
        if self.canvas_scale < 1.0:
            raise ValueError("canvas_scale must be >= 1")
        if self.memory_capacity < 1:
            raise ValueError("memory_capacity must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freq_scale_range"] = list(self.freq_scale_range)
        d["time_scale_range"] = list(self.time_scale_range)
        return d


@dataclass
class MixupMemoryBank:
    """FIFO queue of past segments used as mixup backgrounds.

    Not thread-safe; each training loop owns one bank.
    """

    capacity: int = 2048
    entries: deque = field(default_factory=deque)

    def __post_init__(self):
        self.entries = deque(self.entries, maxlen=self.capacity)

    def __len__(self):
        return len(self.entries)

    def push(self, values: np.ndarray) -> None:
        if self.entries and self.entries[0].shape != values.shape:
            raise ValueError(f"bank holds {self.entries[0].shape} segments, got {values.shape}")
        self.entries.append(np.array(values, copy=True))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.entries[int(rng.integers(len(self.entries)))]


class ViewPair(NamedTuple):
    view_a: LogMelSpectrogram
    view_b: LogMelSpectrogram


def crop_segment(lms: LogMelSpectrogram, segment_frames: int, rng: np.random.Generator) -> LogMelSpectrogram:
    """Random ``segment_frames``-long time crop; short inputs are tiled cyclically first."""
    if segment_frames < 1:
        raise ValueError("segment_frames must be >= 1")
    x = lms.values
    n = x.shape[1]
    if n < segment_frames:
        reps = -(-segment_frames // n)
        x = np.tile(x, (1, reps))
        n = x.shape[1]
    start = int(rng.integers(0, n - segment_frames + 1))
    return lms.with_values(x[:, start : start + segment_frames].copy())


def log_mixup(x: np.ndarray, m: np.ndarray, lam: float) -> np.ndarray:
    """``log((1 - lam) * exp(x) + lam * exp(m))`` computed stably."""
    with np.errstate(divide="ignore"):
        return np.logaddexp(np.log1p(-lam) + x, np.log(lam) + m)


def mixup(
    seg: LogMelSpectrogram,
    bank: MixupMemoryBank,
    rng: np.random.Generator,
    alpha: float = 0.4,
    push: bool = True,
) -> LogMelSpectrogram:
    """Mix a random bank entry into ``seg`` in the log domain, ratio ~ U(0, alpha)."""
    out = seg.values
    if len(bank) > 0:
        lam = float(rng.uniform(0.0, alpha))
        m = bank.sample(rng)
        if m.shape != seg.values.shape:
            raise ValueError(f"bank entry shape {m.shape} != segment shape {seg.values.shape}")
        out = log_mixup(seg.values, m, lam)
    if push:
        bank.push(seg.values)
    return seg.with_values(out)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Linear interpolation weights with aligned corners, shape ``(n_out, n_in)``."""
    w = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        w[:, 0] = 1.0
        return w
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    w[rows, lo] = 1.0 - frac
    w[rows, lo + 1] += frac
    return w


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return _interp_matrix(out_h, x.shape[0]) @ x @ _interp_matrix(out_w, x.shape[1]).T


def resize_crop(x: np.ndarray, top: int, left: int, height: int, width: int) -> np.ndarray:
    """Crop ``x[top:top+height, left:left+width]`` (zero outside ``x``) and resize back to ``x.shape``."""
    h, w = x.shape
    crop = np.zeros((height, width))
    r0, r1 = max(top, 0), min(top + height, h)
    c0, c1 = max(left, 0), min(left + width, w)
    if r1 > r0 and c1 > c0:
        crop[r0 - top : r1 - top, c0 - left : c1 - left] = x[r0:r1, c0:c1]
    return resize_bilinear(crop, h, w)


def random_resize_crop(
    seg: LogMelSpectrogram, cfg: AugmentationConfig, rng: np.random.Generator
) -> LogMelSpectrogram:
    """Pitch-shift / time-stretch style crop from a zero-padded virtual canvas."""
    h, w = seg.values.shape
    canvas_h = int(np.floor(h * cfg.canvas_scale))
    canvas_w = int(np.floor(w * cfg.canvas_scale))
    fs = rng.uniform(*cfg.freq_scale_range)
    ts = rng.uniform(*cfg.time_scale_range)
    crop_h = int(np.clip(round(h * fs), 1, canvas_h))
    crop_w = int(np.clip(round(w * ts), 1, canvas_w))
    i = int(rng.integers(0, canvas_h - crop_h + 1))
    j = int(rng.integers(0, canvas_w - crop_w + 1))
    # canvas coordinates -> input coordinates (input sits centered on the canvas)
    top = i - (canvas_h - h) // 2
    left = j - (canvas_w - w) // 2
    return seg.with_values(resize_crop(seg.values, top, left, crop_h, crop_w))


def make_view_pair(
    lms: LogMelSpectrogram,
    stats: NormalizationStats,
    cfg: AugmentationConfig,
    bank: MixupMemoryBank,
    rng: np.random.Generator,
) -> ViewPair:
    """Standardize, crop once, then augment twice independently and re-standardize each view."""
    seg = crop_segment(standardize(lms, stats), cfg.segment_frames, rng)
    views = []
    for _ in range(2):
        v = mixup(seg, bank, rng, cfg.mixup_alpha, push=False)
        v = random_resize_crop(v, cfg, rng)
        views.append(standardize(v, self_stats(v.values)))
    bank.push(seg.values)
    return ViewPair(*views)
