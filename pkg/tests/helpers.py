"""Shared corpora and brute-force oracles for the test suite."""

import itertools

import numpy as np

from grutv.data import Corpus, Sequence


def skewed_corpus(seed=0, n_sequences=100, length=20, dominant_share=0.9):
    """Corpus whose gaps are exactly 1 h with ``dominant_share`` probability, else 2..8 h."""
    rng = np.random.default_rng(seed)
    seqs = []
    for s in range(n_sequences):
        gaps = np.where(rng.random(length - 1) < dominant_share, 1.0, rng.integers(2, 9, size=length - 1))
        t = np.concatenate([[0.0], np.cumsum(gaps)])
        seqs.append(Sequence.from_values(f"k{s}", t, rng.normal(size=(length, 2)), [0.0]))
    return Corpus(seqs, ["a", "b"], ["y"])


def constant_gap_corpus(n_sequences, length, gap=1.0):
    t = np.arange(length) * gap
    return Corpus([Sequence.from_values(f"c{s}", t, np.zeros((length, 1))) for s in range(n_sequences)])


def pairwise_auroc(scores, labels):
    """O(n^2) pair count with ties worth one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def curve_auprc(scores, labels):
    """Average precision from the explicit precision/recall curve over every distinct threshold."""
    n_pos = sum(labels)
    area = 0.0
    prev_recall = 0.0
    for thr in sorted(set(scores), reverse=True):
        chosen = [y for s, y in zip(scores, labels) if s >= thr]
        tp = sum(chosen)
        recall = tp / n_pos
        area += (recall - prev_recall) * (tp / len(chosen))
        prev_recall = recall
    return area


def random_metric_instance(rng):
    """Scores with deliberate ties and duplicates, labels with both classes."""
    n = int(rng.integers(2, 40))
    levels = int(rng.integers(1, n + 1))
    scores = rng.integers(0, levels, size=n) / max(1, levels)
    if rng.random() < 0.3:
        scores = rng.normal(size=n)
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    return scores.tolist(), labels.tolist()


def thinning_first_gap_oracle(length, q):
    """Exact law of the first kept gap when each non-first record of a unit-gap sequence is kept w.p. q.

    Keys are gaps 1..length-1 and ``None`` for "nothing else kept"; computed by enumerating subsets.
    """
    probs = {}
    for keep in itertools.product([0, 1], repeat=length - 1):
        p = np.prod([q if k else 1.0 - q for k in keep])
        first = next((i + 1 for i, k in enumerate(keep) if k), None)
        probs[first] = probs.get(first, 0.0) + p
    return probs
