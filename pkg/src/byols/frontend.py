"""Audio frontend: resampling, 64-band log-mel spectrograms and standardization.

All functions are pure. Spectrograms are ``(n_mels, T)`` float arrays wrapped in
:class:`LogMelSpectrogram` together with the framing metadata.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

SAMPLE_RATE = 16000
N_MELS = 64
FMIN_HZ = 60.0
FMAX_HZ = 7800.0
WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 512
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8

# windowed-sinc resampler kernel
KAISER_BETA = 14.77
ZERO_CROSSINGS = 64

LMS_MAGIC = b"LMS1"


class FrontendError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise FrontendError("clip samples must be 1-D (mono)")
        if int(self.sample_rate) <= 0:
            raise FrontendError("sample_rate must be positive")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class LogMelSpectrogram:
    values: np.ndarray
    frame_hop_s: float = HOP_LENGTH / SAMPLE_RATE
    frame_len_s: float = WIN_LENGTH / SAMPLE_RATE
    fmin_hz: float = FMIN_HZ
    fmax_hz: float = FMAX_HZ

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "LogMelSpectrogram":
        return LogMelSpectrogram(values, self.frame_hop_s, self.frame_len_s, self.fmin_hz, self.fmax_hz)


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float = field(default=1.0)

    def __post_init__(self):
        if not self.std > 0:
            raise FrontendError("normalization std must be > 0")


# ---------------------------------------------------------------------------
# Resampling


def _resample_kernel(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc low-pass for polyphase resampling at rate ``up``."""
    ratio = max(up, down)
    numtaps = 2 * ZERO_CROSSINGS * ratio + 1
    h = signal.firwin(numtaps, 1.0 / ratio, window=("kaiser", KAISER_BETA))
    return h * up


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited resampling of ``clip`` to ``target_rate``.

    Output length is ``round(N * target_rate / sample_rate)``. Identity rates
    return the samples untouched.
    """
    if target_rate <= 0:
        raise FrontendError("target_rate must be positive")
    if clip.samples.size == 0:
        raise FrontendError("empty clip")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate, clip.id)
    frac = Fraction(int(target_rate), clip.sample_rate)
    up, down = frac.numerator, frac.denominator
    y = signal.resample_poly(clip.samples, up, down, window=_resample_kernel(up, down))
    n_out = int(np.floor(len(clip.samples) * up / down + 0.5))
    return AudioClip(y[:n_out], int(target_rate), clip.id)


# ---------------------------------------------------------------------------
# Mel filterbank and LMS


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = FMIN_HZ, fmax: float = FMAX_HZ) -> np.ndarray:
    """Center frequencies (Hz) of the triangular HTK-mel filters."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(
    sr: int = SAMPLE_RATE,
    n_fft: int = N_FFT,
    n_mels: int = N_MELS,
    fmin: float = FMIN_HZ,
    fmax: float = FMAX_HZ,
) -> np.ndarray:
    """Triangular mel filterbank of shape ``(n_mels, n_fft // 2 + 1)``.

    Filters have unit peak (no area normalization); edges are equally spaced on
    the HTK mel scale between ``fmin`` and ``fmax``.
    """
    fft_freqs = np.linspace(0.0, sr / 2.0, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


_FILTERBANK = mel_filterbank()
_WINDOW = None


def analysis_window() -> np.ndarray:
    """Periodic Hann window of 400 samples, zero-padded to the 512-point FFT."""
    global _WINDOW
    if _WINDOW is None:
        w = signal.get_window("hann", WIN_LENGTH, fftbins=True)
        left = (N_FFT - WIN_LENGTH) // 2
        _WINDOW = np.pad(w, (left, N_FFT - WIN_LENGTH - left))
    return _WINDOW


def stft_magnitude(samples: np.ndarray) -> np.ndarray:
    """Centered (reflect-padded) STFT magnitude, shape ``(n_fft//2+1, T)``."""
    x = np.asarray(samples, dtype=np.float64)
    pad = N_FFT // 2
    x = np.pad(x, (pad, pad), mode="reflect")
    n_frames = 1 + (len(x) - N_FFT) // HOP_LENGTH
    frames = np.lib.stride_tricks.sliding_window_view(x, N_FFT)[::HOP_LENGTH][:n_frames]
    return np.abs(np.fft.rfft(frames * analysis_window(), axis=1)).T


def log_mel(clip: AudioClip) -> LogMelSpectrogram:
    """64-band log-mel magnitude spectrogram (60-7800 Hz, 25 ms / 10 ms).

    The frame count is ``1 + N // 160``; 0.95 s of audio gives 96 frames.
    """
    if clip.sample_rate != SAMPLE_RATE:
        raise FrontendError(f"log_mel expects {SAMPLE_RATE} Hz audio, got {clip.sample_rate}")
    if len(clip.samples) < HOP_LENGTH:
        raise FrontendError("clip too short")
    mel = _FILTERBANK @ stft_magnitude(clip.samples)
    return LogMelSpectrogram(np.log(mel + LOG_FLOOR))


def n_frames_for(n_samples: int) -> int:
    return 1 + n_samples // HOP_LENGTH


def standardize(lms: LogMelSpectrogram, stats: NormalizationStats) -> LogMelSpectrogram:
    return lms.with_values((lms.values - stats.mean) / stats.std)


def self_stats(values: np.ndarray) -> NormalizationStats:
    return NormalizationStats(float(np.mean(values)), max(float(np.std(values)), STD_FLOOR))


def compute_stats(corpus: Sequence[LogMelSpectrogram]) -> NormalizationStats:
    """Dataset-level scalar mean/std over every value of every spectrogram."""
    if len(corpus) == 0:
        raise FrontendError("cannot compute stats of an empty corpus")
    count = 0
    total = 0.0
    for lms in corpus:
        count += lms.values.size
        total += float(np.sum(lms.values, dtype=np.float64))
    mean = total / count
    sq = sum(float(np.sum((lms.values - mean) ** 2, dtype=np.float64)) for lms in corpus)
    return NormalizationStats(mean, max(np.sqrt(sq / count), STD_FLOOR))


# ---------------------------------------------------------------------------
# I/O


def read_wav(path: str | Path, clip_id: str | None = None) -> AudioClip:
    """Read a PCM (16/24/32-bit) or float32 WAV; multichannel is averaged to mono."""
    sr, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-aligns 24-bit samples in int32
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise FrontendError(f"unsupported WAV sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioClip(x, sr, clip_id if clip_id is not None else Path(path).stem)


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write 16-bit PCM mono."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(str(path), clip.sample_rate, pcm)


def lms_to_bytes(lms: LogMelSpectrogram) -> bytes:
    """``LMS1`` blob: magic, u32 n_mels, u32 T, row-major little-endian f32."""
    v = np.ascontiguousarray(lms.values, dtype="<f4")
    return LMS_MAGIC + struct.pack("<II", *v.shape) + v.tobytes()


def lms_from_bytes(blob: bytes) -> LogMelSpectrogram:
    if blob[:4] != LMS_MAGIC:
        raise FrontendError("not an LMS1 blob")
    n_mels, n_frames = struct.unpack("<II", blob[4:12])
    expected = 12 + 4 * n_mels * n_frames
    if len(blob) != expected:
        raise FrontendError(f"LMS1 blob length {len(blob)} != {expected}")
    values = np.frombuffer(blob, dtype="<f4", offset=12).reshape(n_mels, n_frames)
    return LogMelSpectrogram(values.astype(np.float64))
