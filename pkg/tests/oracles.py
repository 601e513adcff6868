"""Brute-force reference implementations used by the metric tests.

These follow the metric definitions literally (loops, exhaustive matching) and
share no code with the library.
"""

import itertools

import numpy as np

from byols.corpus import Event

EPS = 1e-9


def top1_oracle(scores, labels):
    hits = 0
    for row, y in zip(scores, labels):
        best = 0
        for c in range(1, len(row)):
            if row[c] > row[best]:
                best = c
        hits += best == y
    return hits / len(labels)


def ap_oracle(scores, positives):
    # rank = 1 + number of items ranked strictly ahead (higher score, or equal score earlier in input)
    n = len(scores)
    ranks = []
    for i in range(n):
        ranks.append(1 + sum(1 for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i)))
    precisions = []
    for i in range(n):
        if positives[i]:
            k = ranks[i]
            in_top = sum(1 for j in range(n) if positives[j] and ranks[j] <= k)
            precisions.append(in_top / k)
    return sum(precisions) / len(precisions)


def map_oracle(scores, labels):
    aps = [ap_oracle(list(scores[:, c]), list(labels[:, c])) for c in range(scores.shape[1]) if labels[:, c].any()]
    return sum(aps) / len(aps)


def max_matching_oracle(pred, ref, ok):
    """Largest one-to-one pairing under predicate ``ok`` by exhaustive search."""
    best = 0
    if len(pred) > len(ref):
        pred, ref, ok = ref, pred, (lambda a, b, f=ok: f(b, a))
    for perm in itertools.permutations(range(len(ref)), len(pred)):
        best = max(best, sum(1 for i, j in enumerate(perm) if ok(pred[i], ref[j])))
    return best


def fms_oracle(pred, ref, tol=0.05, with_offset=False):
    def ok(p, r):
        if p.label != r.label or abs(p.onset - r.onset) > tol + EPS:
            return False
        return not with_offset or abs(p.offset - r.offset) <= max(tol, 0.2 * (r.offset - r.onset)) + EPS

    m = max_matching_oracle(list(pred), list(ref), ok)
    if m == 0:
        return 0.0
    precision, recall = m / len(pred), m / len(ref)
    return 2 * precision * recall / (precision + recall)


def er_oracle(pred, ref, segment_s, n_segments):
    s = d = i = n = 0
    for k in range(n_segments):
        lo, hi = k * segment_s, (k + 1) * segment_s
        r = {e.label for e in ref if e.onset < hi - EPS and e.offset > lo + EPS}
        p = {e.label for e in pred if e.onset < hi - EPS and e.offset > lo + EPS}
        fn, fp = len(r - p), len(p - r)
        s += min(fn, fp)
        d += max(0, fn - fp)
        i += max(0, fp - fn)
        n += len(r)
    return (s + d + i) / n


def runs_oracle(active):
    """(start, stop) index pairs of maximal True runs."""
    out, start = [], None
    for t, a in enumerate(list(active) + [False]):
        if a and start is None:
            start = t
        elif not a and start is not None:
            out.append((start, t))
            start = None
    return out


def random_events(rng, n_max=4, labels=("a", "b"), horizon=40):
    # times on a 10 ms grid keep tolerance comparisons away from float ties
    out = []
    for _ in range(int(rng.integers(0, n_max + 1))):
        on = int(rng.integers(0, horizon)) / 10
        dur = int(rng.integers(1, 15)) / 10
        out.append(Event(on, on + dur, str(rng.choice(labels))))
    return out


def jitter(events, rng, step=0.01, spread=8):
    return [Event(round(e.onset + step * int(rng.integers(-spread, spread + 1)), 2), round(e.offset + step * int(rng.integers(-spread, spread + 1)), 2) + 0.5, e.label) for e in events]
