"""Linear centered kernel alignment between layer activations of two encoders."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .encoders import Encoder
from .frontend import AudioClip, NormalizationStats, log_mel, standardize

MIN_PROBE_CLIPS = 32
RANGE_SLACK = 1e-9


class CkaError(ValueError):
    pass


@dataclass
class ActivationMatrix:
    values: np.ndarray
    layer_name: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 2:
            raise CkaError("activation matrix must be 2-D with at least 2 examples")
        if not np.all(np.isfinite(self.values)):
            raise CkaError("non-finite activations")


@dataclass
class CkaSimilarityMatrix:
    values: np.ndarray
    layer_names_a: list
    layer_names_b: list

    def to_dict(self) -> dict:
        return {
            "layer_names_a": list(self.layer_names_a),
            "layer_names_b": list(self.layer_names_b),
            "values": [[float(v) for v in row] for row in self.values],
        }


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, ActivationMatrix) else ActivationMatrix(x).values


def centered_gram(x) -> np.ndarray:
    """``H X X^T H`` with ``H = I - 11^T / n``."""
    v = _values(x)
    k = v @ v.T
    # same as H K H without forming H
    k = k - k.mean(axis=0, keepdims=True)
    return k - k.mean(axis=1, keepdims=True)


def hsic(kx: np.ndarray, ky: np.ndarray) -> float:
    """Biased HSIC: Frobenius inner product of two centered Gram matrices."""
    return float(np.sum(kx * ky))


def linear_cka(x, y) -> float:
    kx, ky = centered_gram(x), centered_gram(y)
    if kx.shape != ky.shape:
        raise CkaError("activation matrices must have the same number of examples")
    xx, yy = hsic(kx, kx), hsic(ky, ky)
    scale = max(np.abs(_values(x)).max(), np.abs(_values(y)).max(), 1.0)
    if xx <= 1e-24 * scale**4 or yy <= 1e-24 * scale**4:
        raise CkaError("constant activations")
    # symmetric in (x, y) by construction
    return hsic(kx, ky) / np.sqrt(xx * yy)


def flatten_activation(a: torch.Tensor | np.ndarray) -> np.ndarray:
    """Per-example features: mean over the trailing time axis for 3-D/4-D maps, then flatten.

    Encoder layer maps are ``(B, C, F, T)`` or ``(B, T, D)``; the latter is
    pooled over axis 1.
    """
    a = a.detach().double().numpy() if isinstance(a, torch.Tensor) else np.asarray(a, dtype=np.float64)
    if a.ndim == 4:
        a = a.mean(axis=-1)
    elif a.ndim == 3:
        a = a.mean(axis=1)
    return a.reshape(a.shape[0], -1)


@torch.no_grad()
def layer_activations(encoder: Encoder, batch: np.ndarray) -> dict:
    was_training = encoder.training
    encoder.eval()
    try:
        dtype = next(encoder.parameters()).dtype
        outs = encoder.layer_outputs(torch.as_tensor(np.asarray(batch), dtype=dtype))
    finally:
        encoder.train(was_training)
    return {name: ActivationMatrix(flatten_activation(t), name) for name, t in outs.items()}


def probe_batch(clips: Sequence[AudioClip], stats: NormalizationStats, frames: int | None = None) -> np.ndarray:
    """Standardized ``(n, 64, T)`` probe batch; all clips must give the same frame count unless ``frames`` is set."""
    specs = []
    for c in clips:
        v = standardize(log_mel(c), stats).values
        if frames is not None:
            reps = -(-frames // v.shape[1])
            v = np.tile(v, (1, reps))[:, :frames]
        specs.append(v)
    if len({c.sample_rate for c in clips}) > 1 or len({s.shape for s in specs}) > 1:
        raise CkaError("mismatched probe preprocessing")
    return np.stack(specs)


def similarity_from_activations(acts_a: dict, acts_b: dict) -> CkaSimilarityMatrix:
    names_a, names_b = list(acts_a), list(acts_b)
    vals = np.array([[linear_cka(acts_a[i], acts_b[j]) for j in names_b] for i in names_a])
    return CkaSimilarityMatrix(np.clip(vals, 0.0, 1.0), names_a, names_b)


def model_similarity(
    encoder_a: Encoder,
    encoder_b: Encoder,
    probe_a: np.ndarray,
    probe_b: np.ndarray | None = None,
) -> CkaSimilarityMatrix:
    """All-pairs linear CKA between the named layer outputs of two encoders.

    ``probe_a`` / ``probe_b`` are the same probe clips preprocessed with each
    model's own normalization statistics (``probe_b`` defaults to ``probe_a``).
    """
    probe_b = probe_a if probe_b is None else probe_b
    if probe_a.shape != probe_b.shape:
        raise CkaError("mismatched probe preprocessing")
    if len(probe_a) < MIN_PROBE_CLIPS:
        raise CkaError(f"probe set needs at least {MIN_PROBE_CLIPS} clips")
    return similarity_from_activations(layer_activations(encoder_a, probe_a), layer_activations(encoder_b, probe_b))


def write_matrix_json(path: str | Path, m: CkaSimilarityMatrix) -> None:
    with open(path, "w") as fh:
        json.dump(m.to_dict(), fh, indent=2)


def write_matrix_csv(path: str | Path, m: CkaSimilarityMatrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer"] + list(m.layer_names_b))
        for name, row in zip(m.layer_names_a, m.values):
            w.writerow([name] + [repr(float(v)) for v in row])


def plot_matrix(path: str | Path, m: CkaSimilarityMatrix, title: str = "linear CKA") -> None:
    """Heatmap PNG with model A layers on rows."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1 + 0.6 * len(m.layer_names_b), 1 + 0.5 * len(m.layer_names_a)))
    im = ax.imshow(m.values, vmin=0.0, vmax=1.0, cmap="magma", origin="lower")
    ax.set_xticks(range(len(m.layer_names_b)), m.layer_names_b, rotation=45, ha="right")
    ax.set_yticks(range(len(m.layer_names_a)), m.layer_names_a)
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
