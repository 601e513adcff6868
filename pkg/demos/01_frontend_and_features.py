"""
From waveform to log-mel and handcrafted features
=================================================

Synthesizes a short two-tone clip, shows its log-mel spectrogram and the
480-dimensional handcrafted feature vector that hybrid training regresses.
Writes ``frontend.png`` next to this script.
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from byols.features import FEATURE_NAMES, extract_features
from byols.frontend import AudioClip, log_mel, mel_center_frequencies

sr = 16000
t = np.arange(sr) / sr
# 440 Hz for the first half second, 1 kHz after that
x = np.where(t < 0.5, np.sin(2 * np.pi * 440 * t), np.sin(2 * np.pi * 1000 * t))
clip = AudioClip(0.5 * x, sr, "two_tones")

# 25 ms windows every 10 ms, 64 mel bands
lms = log_mel(clip)
print("log-mel shape (bands, frames):", lms.values.shape)

centers = mel_center_frequencies()
peak = np.argmax(lms.values, axis=0)
print("peak band first/last frame: %.0f Hz / %.0f Hz" % (centers[peak[5]], centers[peak[-5]]))

# handcrafted features: LLDs + deltas, each summarized by 12 functionals
feats = extract_features(clip)
print("feature vector length:", len(feats.values))
for name in ("f0__mean", "zcr__mean", "spectral_flux__mean"):
    print("  %-20s %.4f" % (name, feats.values[FEATURE_NAMES.index(name)]))

plt.figure(figsize=(7, 3))
plt.imshow(lms.values, origin="lower", aspect="auto", extent=[0, 1, 0, 64])
plt.xlabel("time [s]")
plt.ylabel("mel band")
plt.colorbar(label="log power")
plt.tight_layout()
plt.savefig(Path(__file__).with_name("frontend.png"), dpi=100)
