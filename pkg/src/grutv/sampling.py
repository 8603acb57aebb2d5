"""Record-level subsampling: uniform thinning and inverse-proportional sampling.

Inverse-proportional sampling keeps a record with a probability that is
inversely proportional to how common its gap (to the nearest earlier kept
record) is in the original corpus, which evens out the interval distribution.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from grutv.data import Corpus, adjacent_intervals, bucket_of
from grutv.errors import SamplingError, UsageError

MAX_PASSES = 10_000


@dataclass
class SamplingDict:
    counts: dict
    probs: dict
    c_all: int
    width: float = 1.0

    @classmethod
    def from_counts(cls, counts, width=1.0):
        counts = {float(k): int(v) for k, v in sorted(counts.items()) if v > 0}
        if not counts:
            raise UsageError("sampling dictionary needs at least one interval")
        c_all = sum(counts.values())
        probs = {k: 1.0 / (c * c_all) for k, c in counts.items()}
        return cls(counts, probs, c_all, width)

    @property
    def max_prob(self):
        return max(self.probs.values())

    def prob(self, gap, normalize=True):
        """Selection probability for a raw gap; unseen buckets get the largest probability."""
        p = self.probs.get(bucket_of(gap, self.width), self.max_prob)
        return p / self.max_prob if normalize else p


def build_sampling_dict(corpus, bucket_width=1.0):
    gaps = adjacent_intervals(corpus)
    if gaps.size == 0:
        raise UsageError("build_sampling_dict: corpus has no adjacent record pairs")
    return SamplingDict.from_counts(Counter(bucket_of(g, bucket_width) for g in gaps), bucket_width)


def sequence_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def sample_sequence(corpus, mode, target_rate, sdict=None, seed=0, normalize=True, max_passes=MAX_PASSES):
    """Select records from every sequence until the global kept fraction reaches ``target_rate``.

    Index 0 of every sequence is always kept.  Passes run over the unselected
    records; in ``uniform`` mode each is accepted with probability
    ``target_rate``, in ``inverse`` mode with the dictionary probability of its
    gap to the nearest earlier selected record.  The rate is checked after
    each full pass.  With ``normalize`` the dictionary probabilities are
    divided by their maximum so the rarest gap is always accepted.

    Returns one sorted index array per sequence.
    """
    if mode not in ("uniform", "inverse"):
        raise UsageError(f"unknown sampling mode {mode!r}")
    if not 0.0 < target_rate <= 1.0:
        raise UsageError(f"target rate must be in (0, 1], got {target_rate}")
    if mode == "inverse" and sdict is None:
        raise UsageError("inverse sampling needs a sampling dictionary")
    seqs = list(corpus)
    total = sum(len(s) for s in seqs)
    selected = [np.zeros(len(s), dtype=bool) for s in seqs]
    for sel in selected:
        if len(sel):
            sel[0] = True
    kept = sum(int(sel.sum()) for sel in selected)
    if total == 0:
        return [np.zeros(0, dtype=int) for _ in seqs]
    rngs = [sequence_rng(seed, i) for i in range(len(seqs))]
    passes = 0
    while kept / total < target_rate:
        if passes >= max_passes:
            raise SamplingError(
                f"sampling reached only rate {kept / total:.4f} < {target_rate} after {max_passes} passes"
            )
        passes += 1
        for s, sel, rng in zip(seqs, selected, rngs):
            n = len(s)
            if n < 2 or sel.all():
                continue
            if mode == "uniform":
                todo = np.flatnonzero(~sel)
                accept = rng.random(len(todo)) <= target_rate
                sel[todo[accept]] = True
                kept += int(accept.sum())
                continue
            t = s.t
            last = 0
            for i in range(1, n):
                if sel[i]:
                    last = i
                    continue
                p = sdict.prob(t[i] - t[last], normalize)
                if rng.random() <= p:
                    sel[i] = True
                    last = i
                    kept += 1
    return [np.flatnonzero(sel) for sel in selected]


def apply_selection(corpus, selection):
    """Return a corpus with each sequence restricted to its selected indices."""
    return Corpus([s.take(idx) for s, idx in zip(corpus, selection)],
                  list(corpus.variables), list(corpus.tasks))


def gap_cv2(gaps):
    """Squared coefficient of variation ``Var / Mean^2`` of a set of intervals."""
    gaps = np.asarray(gaps, dtype=np.float64)
    if gaps.size == 0:
        return float("nan")
    mu = gaps.mean()
    return float(gaps.var() / (mu * mu))
