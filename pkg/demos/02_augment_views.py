"""
Two augmented views of one spectrogram
======================================

Each training example becomes two views: a shared crop, then independent
log-domain mixup and random resize crop per view. Writes ``views.png``.
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from byols.augment import AugmentationConfig, MixupMemoryBank, make_view_pair
from byols.frontend import AudioClip, compute_stats, log_mel

rng = np.random.default_rng(0)
sr = 16000
t = np.arange(2 * sr) / sr
clips = [AudioClip(np.sin(2 * np.pi * f * t) + 0.05 * rng.standard_normal(t.size), sr) for f in (220, 330, 550, 880)]
specs = [log_mel(c) for c in clips]
stats = compute_stats(specs)

cfg = AugmentationConfig(segment_frames=96, memory_capacity=16)
bank = MixupMemoryBank(cfg.memory_capacity)
# warm the mixup memory so the views below actually mix in background
for s in specs[1:]:
    make_view_pair(s, stats, cfg, bank, rng)
a, b = make_view_pair(specs[0], stats, cfg, bank, rng)
print("view shapes:", a.values.shape, b.values.shape)
print("view means/stds: %.3f/%.3f  %.3f/%.3f" % (a.values.mean(), a.values.std(), b.values.mean(), b.values.std()))

fig, ax = plt.subplots(1, 2, figsize=(8, 3), sharey=True)
for k, v in enumerate((a, b)):
    ax[k].imshow(v.values, origin="lower", aspect="auto")
    ax[k].set_title("view %d" % (k + 1))
plt.tight_layout()
plt.savefig(Path(__file__).with_name("views.png"), dpi=100)
