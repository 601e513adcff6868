"""
Timestamp embeddings and onset detection
========================================

Builds centred windows every 50 ms over synthetic tone-burst clips, trains a
frame-wise probe and decodes events. Uses an untrained encoder to stay fast;
swap in a trained checkpoint via ``byols.checkpoint.load_encoder``.
"""
import tempfile

import numpy as np

from byols.corpus import SyntheticTaskSpec, generate_synthetic_corpus, load_manifest
from byols.embeddings import timestamp_embeddings
from byols.encoders import EncoderConfig, build_encoder
from byols.evaluation import EventClip, ProbeConfig, event_probe_metrics, events_from_frames
from byols.experiment import load_clips
from byols.frontend import compute_stats, log_mel

root = tempfile.mkdtemp(prefix="byols_events_")
spec = SyntheticTaskSpec("event_onsets", n_clips=60, clip_s=4.0, n_classes=3, snr_db=30.0)
manifest = load_manifest(generate_synthetic_corpus(spec, root))
clips = load_clips(manifest)
stats = compute_stats([log_mel(c) for c in clips])
print("first clip events:", manifest.records[0].events)

encoder = build_encoder(EncoderConfig("DefaultCnn", 0.125, seed=0)).eval()
event_clips = []
for rec, clip in zip(manifest.records, clips):
    s = timestamp_embeddings(clip, encoder, stats, window_s=0.5, hop_s=0.05)
    emb = np.stack([e.values for e in s.embeddings])
    event_clips.append(EventClip(s.timestamps, emb, rec.events, clip.duration, rec.split))
print("windows per 4 s clip:", len(event_clips[0].timestamps))

metrics = event_probe_metrics(event_clips, manifest.event_labels(), ProbeConfig([512], epochs=300), thresholds=[0.3, 0.5, 0.7])
print({k: round(v, 3) if isinstance(v, float) else v for k, v in metrics.items()})

# the decoding step on its own: frame probabilities -> events
probs = np.zeros((20, 1))
probs[5:12, 0] = 0.9
print(events_from_frames(probs, np.arange(20) * 0.05, class_names=["burst"]))
