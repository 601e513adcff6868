"""Hybrid bootstrap audio representation learning at desk scale.

Submodules
----------
frontend      log-mel front end, resampling, WAV and LMS1 I/O
augment       two-view spectrogram augmentation
features      handcrafted DSP features (the hybrid supervision target)
encoders      the four encoder architectures
trainer       online/target bootstrap training with the hybrid loss
checkpoint    versioned, hashed checkpoint files
embeddings    scene and timestamp embeddings, EMB1 I/O
evaluation    probes and scene/event metrics
cka           linear CKA layer similarity
corpus        manifests and synthetic corpora
config        strict YAML experiment configs
experiment    end-to-end runs and sweeps
"""

__version__ = "0.1.0"
