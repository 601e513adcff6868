"""Downstream evaluation: shallow probes on frozen embeddings, scene and event metrics."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
import torch
from torch import nn
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .corpus import Event

# slack for float comparisons on time grids
TIME_EPS = 1e-9


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Probes


@dataclass
class LabeledEmbeddingSet:
    """Embeddings with integer labels (shape ``(n,)``) or binary label matrices (``(n, C)``)."""

    embeddings: np.ndarray
    labels: np.ndarray
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.labels):
            raise EvaluationError("embeddings must be (n, d) with one label entry per row")
        if not self.class_names:
            n = self.labels.shape[1] if self.multilabel else int(self.labels.max()) + 1
            self.class_names = [str(i) for i in range(n)]
        if not self.multilabel and len(self.labels) and self.labels.max() >= self.n_classes:
            raise EvaluationError("label index out of range")

    @property
    def multilabel(self) -> bool:
        return self.labels.ndim == 2

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class ProbeConfig:
    hidden_layers: list = field(default_factory=lambda: [512])
    learning_rate: float = 1e-3
    epochs: int = 200
    seed: int = 0
    patience: int = 20
    weight_decay: float = 0.0

    def __post_init__(self):
        self.hidden_layers = [int(h) for h in self.hidden_layers]
        if len(self.hidden_layers) > 2 or any(h < 1 for h in self.hidden_layers):
            raise ValueError("probe supports 0-2 hidden layers of positive width")
        if self.learning_rate <= 0 or self.epochs < 0 or self.patience < 1:
            raise ValueError("invalid probe hyper-parameters")

    def to_dict(self) -> dict:
        return asdict(self)


class Probe(nn.Module):
    """Standardizing MLP classifier over frozen embeddings."""

    def __init__(self, dim: int, n_classes: int, hidden: Sequence[int], multilabel: bool, mean, std):
        super().__init__()
        layers = []
        prev = dim
        for h in hidden:
            layers += [nn.Linear(prev, h), nn.ReLU()]
            prev = h
        layers.append(nn.Linear(prev, n_classes))
        self.net = nn.Sequential(*layers).double()
        self.multilabel = multilabel
        self.register_buffer("mean", torch.as_tensor(mean, dtype=torch.float64))
        self.register_buffer("std", torch.as_tensor(std, dtype=torch.float64))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net((x - self.mean) / self.std)

    @torch.no_grad()
    def predict_proba(self, embeddings: np.ndarray) -> np.ndarray:
        logits = self(torch.as_tensor(np.asarray(embeddings), dtype=torch.float64))
        return (torch.sigmoid(logits) if self.multilabel else torch.softmax(logits, dim=-1)).numpy()


def _probe_loss(probe: Probe, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    logits = probe(x)
    if probe.multilabel:
        return nn.functional.binary_cross_entropy_with_logits(logits, y)
    return nn.functional.cross_entropy(logits, y)


def train_probe(train: LabeledEmbeddingSet, val: LabeledEmbeddingSet, cfg: ProbeConfig) -> Probe:
    """Full-batch Adam on cross-entropy (or per-class BCE); weights with the best validation loss win."""
    if train.dim != val.dim or train.n_classes != val.n_classes or train.multilabel != val.multilabel:
        raise EvaluationError("train/val embedding sets disagree on dimension or classes")
    mean = train.embeddings.mean(axis=0)
    std = train.embeddings.std(axis=0)
    # unit scale for dims constant on train; a tiny floor would amplify any val/test deviation
    std = np.where(std < 1e-8, 1.0, std)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        probe = Probe(train.dim, train.n_classes, cfg.hidden_layers, train.multilabel, mean, std)
    label_dtype = torch.float64 if train.multilabel else torch.long
    xt = torch.tensor(train.embeddings)
    yt = torch.tensor(train.labels, dtype=label_dtype)
    xv = torch.tensor(val.embeddings)
    yv = torch.tensor(val.labels, dtype=label_dtype)
    opt = torch.optim.Adam(probe.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    with torch.no_grad():
        best = float(_probe_loss(probe, xv, yv))
    best_state = copy.deepcopy(probe.state_dict())
    stale = 0
    for _ in range(cfg.epochs):
        opt.zero_grad()
        _probe_loss(probe, xt, yt).backward()
        opt.step()
        with torch.no_grad():
            v = float(_probe_loss(probe, xv, yv))
        if v < best:
            best, stale = v, 0
            best_state = copy.deepcopy(probe.state_dict())
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    probe.load_state_dict(best_state)
    return probe


# ---------------------------------------------------------------------------
# Scene metrics


def top1_accuracy(predictions, labels) -> float:
    """Fraction of correct top-1 predictions.

    ``predictions`` is an ``(n, C)`` score matrix (argmax, ties to the lowest
    class index) or an ``(n,)`` vector of predicted class indices.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EvaluationError("top1_accuracy of an empty set")
    if len(predictions) != len(labels):
        raise EvaluationError("predictions and labels differ in length")
    pred = predictions.argmax(axis=1) if predictions.ndim == 2 else predictions
    return float(np.mean(pred == labels))


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """AP of one ranked list: mean precision at the rank of each positive.

    Ranking is by descending score; equal scores keep their input order.
    """
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(positives, dtype=bool)[order]
    if not hits.any():
        raise EvaluationError("no positives")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def mean_average_precision(scores, binary_labels) -> float:
    """Macro mean of per-class AP over classes that have at least one positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(binary_labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise EvaluationError("scores and labels must be matching (n, C) matrices")
    aps = [average_precision(scores[:, c], labels[:, c]) for c in range(scores.shape[1]) if labels[:, c].any()]
    if not aps:
        raise EvaluationError("no class has a positive example")
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# Event metrics


def events_from_frames(
    frame_probs,
    timestamps,
    threshold: float = 0.5,
    min_duration_s: float | None = None,
    class_names: Sequence[str] | None = None,
    hop_s: float | None = None,
) -> list[Event]:
    """Merge frames with probability above ``threshold`` into per-class events.

    Each run of active frames becomes ``[first_ts - hop/2, last_ts + hop/2]``;
    runs shorter than ``min_duration_s`` (default: two hops) are dropped.
    """
    probs = np.asarray(frame_probs, dtype=np.float64)
    ts = np.asarray(timestamps, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[:, None]
    if hop_s is None:
        if len(ts) < 2:
            raise EvaluationError("hop_s required for fewer than two frames")
        hop_s = float(ts[1] - ts[0])
    if min_duration_s is None:
        min_duration_s = 2 * hop_s
    names = list(class_names) if class_names is not None else [str(c) for c in range(probs.shape[1])]
    events = []
    for c in range(probs.shape[1]):
        active = np.concatenate([[False], probs[:, c] > threshold, [False]])
        edges = np.flatnonzero(np.diff(active.astype(np.int8)))
        for start, stop in zip(edges[::2], edges[1::2]):
            if (stop - start) * hop_s + TIME_EPS < min_duration_s:
                continue
            events.append(Event(float(ts[start] - hop_s / 2), float(ts[stop - 1] + hop_s / 2), names[c]))
    return sorted(events, key=lambda e: (e.onset, e.label))


def _by_label(events: Sequence[Event]) -> dict:
    out: dict = {}
    for e in events:
        out.setdefault(e.label, []).append(e)
    return out


def _greedy_onset_matches(pred: list[Event], ref: list[Event], tol: float) -> int:
    # Sorted greedy matching is maximum here: every tolerance window has the same width.
    p = sorted(e.onset for e in pred)
    r = sorted(e.onset for e in ref)
    j = 0
    n = 0
    for onset in p:
        while j < len(r) and r[j] < onset - tol - TIME_EPS:
            j += 1
        if j < len(r) and abs(r[j] - onset) <= tol + TIME_EPS:
            n += 1
            j += 1
    return n


def offset_tolerance(ref: Event, tol: float = 0.05, ratio: float = 0.2) -> float:
    return max(tol, ratio * (ref.offset - ref.onset))


def _bipartite_matches(pred: list[Event], ref: list[Event], tol: float) -> int:
    if not pred or not ref:
        return 0
    rows, cols = [], []
    for i, p in enumerate(pred):
        for j, r in enumerate(ref):
            if abs(p.onset - r.onset) <= tol + TIME_EPS and abs(p.offset - r.offset) <= offset_tolerance(r, tol) + TIME_EPS:
                rows.append(i)
                cols.append(j)
    if not rows:
        return 0
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(pred), len(ref)))
    return int(np.sum(maximum_bipartite_matching(graph, perm_type="column") >= 0))


def count_matches(predicted: Sequence[Event], reference: Sequence[Event], tolerance_s: float = 0.05, with_offset: bool = False) -> int:
    pred, ref = _by_label(predicted), _by_label(reference)
    total = 0
    for label in set(pred) & set(ref):
        if with_offset:
            total += _bipartite_matches(pred[label], ref[label], tolerance_s)
        else:
            total += _greedy_onset_matches(pred[label], ref[label], tolerance_s)
    return total


def onset_prf(predicted, reference, tolerance_s: float = 0.05, with_offset: bool = False) -> tuple[float, float, float]:
    n_match = count_matches(predicted, reference, tolerance_s, with_offset)
    precision = n_match / len(predicted) if predicted else 0.0
    recall = n_match / len(reference) if reference else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f


def onset_fms(predicted: Sequence[Event], reference: Sequence[Event], tolerance_s: float = 0.05) -> float:
    """Onset F-measure: same-class events match one-to-one when onsets differ by at most ``tolerance_s``."""
    return onset_prf(predicted, reference, tolerance_s)[2]


def onset_offset_fms(predicted: Sequence[Event], reference: Sequence[Event], tolerance_s: float = 0.05) -> float:
    """Onset F-measure that also requires ``|offset diff| <= max(tol, 20% of reference duration)``."""
    return onset_prf(predicted, reference, tolerance_s, with_offset=True)[2]


def _active_sets(events: Sequence[Event], n_segments: int, segment_s: float) -> list[set]:
    sets = [set() for _ in range(n_segments)]
    for e in events:
        if e.offset > e.onset:
            first = int(np.floor(e.onset / segment_s + TIME_EPS))
            last = int(np.ceil(e.offset / segment_s - TIME_EPS)) - 1
        else:
            first = last = int(np.floor(e.onset / segment_s + TIME_EPS))
        for k in range(max(first, 0), min(last, n_segments - 1) + 1):
            sets[k].add(e.label)
    return sets


def segment_counts(predicted, reference, segment_s: float = 1.0, duration_s: float | None = None) -> dict:
    if segment_s <= 0:
        raise EvaluationError("segment_s must be positive")
    end = max([e.offset for e in list(predicted) + list(reference)] + [duration_s or 0.0])
    n_segments = max(1, int(np.ceil(end / segment_s - TIME_EPS)))
    ref_sets = _active_sets(reference, n_segments, segment_s)
    pred_sets = _active_sets(predicted, n_segments, segment_s)
    totals = {"S": 0, "D": 0, "I": 0, "N": 0}
    for r, p in zip(ref_sets, pred_sets):
        fn = len(r - p)
        fp = len(p - r)
        totals["S"] += min(fn, fp)
        totals["D"] += max(0, fn - fp)
        totals["I"] += max(0, fp - fn)
        totals["N"] += len(r)
    return totals


def segment_error_rate(predicted: Sequence[Event], reference: Sequence[Event], segment_s: float = 1.0, duration_s: float | None = None) -> float:
    """Segment-based error rate ``(S + D + I) / N`` over ``segment_s`` bins.

    An event is active in a segment when their time spans overlap.
    """
    c = segment_counts(predicted, reference, segment_s, duration_s)
    if c["N"] == 0:
        raise EvaluationError("reference has no active segments")
    return (c["S"] + c["D"] + c["I"]) / c["N"]


def frame_labels(events: Sequence[Event], timestamps, class_names: Sequence[str]) -> np.ndarray:
    """Binary ``(T, C)`` activity at each timestamp (``onset <= t < offset``)."""
    ts = np.asarray(timestamps, dtype=np.float64)
    out = np.zeros((len(ts), len(class_names)))
    index = {c: i for i, c in enumerate(class_names)}
    for e in events:
        out[(ts >= e.onset - TIME_EPS) & (ts < e.offset - TIME_EPS), index[e.label]] = 1.0
    return out


# ---------------------------------------------------------------------------
# Task drivers


def split_indices(splits: Sequence[str | None]) -> dict:
    """Index arrays per split; clips without a split fall back to a 60/20/20 order split."""
    n = len(splits)
    out = {"train": [], "val": [], "test": []}
    for i, s in enumerate(splits):
        if s is None:
            frac = i / n
            s = "train" if frac < 0.6 else ("val" if frac < 0.8 else "test")
        out[s].append(i)
    if not out["train"] or not out["test"]:
        raise EvaluationError("probe needs non-empty train and test splits")
    if not out["val"]:
        out["val"] = list(out["train"])
    return {k: np.asarray(v, dtype=int) for k, v in out.items()}


def scene_probe_metrics(embeddings: np.ndarray, labels: Sequence[str], splits: Sequence[str | None], cfg: ProbeConfig) -> dict:
    """Train a probe on the train split (early stopping on val) and score the test split."""
    class_names = sorted(set(labels))
    y = np.array([class_names.index(lab) for lab in labels])
    idx = split_indices(splits)
    sets = {k: LabeledEmbeddingSet(np.asarray(embeddings)[v], y[v], class_names) for k, v in idx.items()}
    probe = train_probe(sets["train"], sets["val"], cfg)
    probs = probe.predict_proba(sets["test"].embeddings)
    onehot = np.eye(len(class_names))[sets["test"].labels]
    return {
        "top1_accuracy": top1_accuracy(probs, sets["test"].labels),
        "mAP": mean_average_precision(probs, onehot),
        "n_train": int(len(idx["train"])),
        "n_test": int(len(idx["test"])),
    }


@dataclass
class EventClip:
    timestamps: np.ndarray
    embeddings: np.ndarray
    events: list
    duration_s: float
    split: str | None = None


def _decode_counts(probe: Probe, clips, ids, class_names, threshold, min_hops, tolerance_s, segment_s):
    n_match = n_pred = n_ref = 0
    seg = {"S": 0, "D": 0, "I": 0, "N": 0}
    for i in ids:
        c = clips[i]
        hop = float(c.timestamps[1] - c.timestamps[0])
        pred = events_from_frames(probe.predict_proba(c.embeddings), c.timestamps, threshold, min_hops * hop, class_names, hop)
        n_match += count_matches(pred, c.events, tolerance_s)
        n_pred += len(pred)
        n_ref += len(c.events)
        for k, v in segment_counts(pred, c.events, segment_s, c.duration_s).items():
            seg[k] += v
    precision = n_match / n_pred if n_pred else 0.0
    recall = n_match / n_ref if n_ref else 0.0
    fms = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    er = (seg["S"] + seg["D"] + seg["I"]) / seg["N"] if seg["N"] else float("nan")
    return {"onset_fms": fms, "onset_precision": precision, "onset_recall": recall, "segment_error_rate": er}


def event_probe_metrics(
    clips: Sequence[EventClip],
    class_names: Sequence[str],
    cfg: ProbeConfig,
    thresholds: Sequence[float] = (0.5,),
    min_duration_hops: Sequence[int] = (2,),
    tolerance_s: float = 0.05,
    segment_s: float = 1.0,
) -> dict:
    """Frame-wise multi-label probe, event decoding on test clips, pooled onset F-measure and segment error rate.

    When several thresholds or minimum durations are given, the pair with the
    best validation onset F-measure (first in grid order on ties) decodes the test split.
    """
    idx = split_indices([c.split for c in clips])

    def stack(ids):
        x = np.concatenate([clips[i].embeddings for i in ids])
        y = np.concatenate([frame_labels(clips[i].events, clips[i].timestamps, class_names) for i in ids])
        return LabeledEmbeddingSet(x, y, list(class_names))

    probe = train_probe(stack(idx["train"]), stack(idx["val"]), cfg)
    grid = [(float(t), int(h)) for t in thresholds for h in min_duration_hops]
    best = grid[0]
    if len(grid) > 1:
        scores = [_decode_counts(probe, clips, idx["val"], class_names, t, h, tolerance_s, segment_s)["onset_fms"] for t, h in grid]
        best = grid[int(np.argmax(scores))]
    out = _decode_counts(probe, clips, idx["test"], class_names, best[0], best[1], tolerance_s, segment_s)
    out.update({
        "threshold": best[0],
        "min_duration_hops": best[1],
        "n_train": int(len(idx["train"])),
        "n_test": int(len(idx["test"])),
    })
    return out
