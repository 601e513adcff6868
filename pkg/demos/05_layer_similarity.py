"""
Layer-wise CKA between two encoders
===================================

Compares every layer of two differently seeded DefaultCnn encoders with
linear CKA and saves the heat map as ``cka.png``.
"""
from pathlib import Path

import numpy as np

from byols.cka import linear_cka, model_similarity, plot_matrix, probe_batch
from byols.encoders import EncoderConfig, build_encoder
from byols.frontend import AudioClip, NormalizationStats

rng = np.random.default_rng(0)
# CKA basics: invariant to rotation and scale, 1 on identical inputs
x = rng.normal(size=(100, 20))
q, _ = np.linalg.qr(rng.normal(size=(20, 20)))
print("CKA(X, X)      = %.6f" % linear_cka(x, x))
print("CKA(X, 3 X Q)  = %.6f" % linear_cka(x, 3 * x @ q))
print("CKA(X, noise)  = %.6f" % linear_cka(x, rng.normal(size=(100, 20))))

clips = [AudioClip(np.sin(2 * np.pi * rng.uniform(100, 2000) * np.arange(16000) / 16000) + 0.1 * rng.standard_normal(16000), 16000) for _ in range(48)]
batch = probe_batch(clips, NormalizationStats(-5.0, 4.0), frames=96)
a = build_encoder(EncoderConfig("DefaultCnn", 0.125, seed=0))
b = build_encoder(EncoderConfig("DefaultCnn", 0.125, seed=1))
m = model_similarity(a, b, batch)
for name, row in zip(m.layer_names_a, m.values):
    print("%-6s" % name, " ".join("%.2f" % v for v in row))
plot_matrix(Path(__file__).with_name("cka.png"), m, title="seed 0 vs seed 1")
