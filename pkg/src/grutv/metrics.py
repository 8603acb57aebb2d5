"""Threshold-free binary metrics and their macro aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from grutv.errors import UndefinedMetricError


def _prepare(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    return scores, labels > 0.5


def auroc(scores, labels):
    """Probability that a random positive outscores a random negative, ties counting one half."""
    scores, pos = _prepare(scores, labels)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    p = pos[order]
    # walk tie groups in ascending order; each positive beats all negatives strictly below
    wins = 0.0
    neg_below = 0
    i = 0
    n = s.size
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        grp_pos = int(p[i:j].sum())
        grp_neg = (j - i) - grp_pos
        wins += grp_pos * (neg_below + 0.5 * grp_neg)
        neg_below += grp_neg
        i = j
    return wins / (n_pos * n_neg)


def auprc(scores, labels):
    """Average precision: sum over distinct thresholds of recall increment times precision."""
    scores, pos = _prepare(scores, labels)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive label")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    tp = np.cumsum(pos[order])
    # last index of every tie group = the operating point of that threshold
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends].astype(np.float64)
    precision = tp_at / (ends + 1)
    recall = tp_at / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def macro_average(values):
    """Mean of the defined entries; ``None``/NaN entries are excluded."""
    defined = [float(v) for v in values if v is not None and not math.isnan(v)]
    if not defined:
        raise UndefinedMetricError("no task has a defined metric")
    return sum(defined) / len(defined)


def _safe(fn, scores, labels):
    try:
        return fn(scores, labels)
    except UndefinedMetricError:
        return None


@dataclass
class EvalReport:
    tasks: list
    auroc: list
    auprc: list
    macro_auroc: float | None
    macro_auprc: float | None
    positives: list
    negatives: list

    def to_dict(self):
        return {
            "tasks": list(self.tasks),
            "auroc": list(self.auroc),
            "auprc": list(self.auprc),
            "macro_auroc": self.macro_auroc,
            "macro_auprc": self.macro_auprc,
            "positives": list(self.positives),
            "negatives": list(self.negatives),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def evaluate(probs, labels, tasks=None):
    """Per-task and macro AUROC/AUPRC for ``(n, K)`` predictions and labels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.ndim == 1:
        probs, labels = probs[:, None], labels[:, None]
    k = probs.shape[1]
    tasks = list(tasks) if tasks else [f"task{i + 1}" for i in range(k)]
    roc = [_safe(auroc, probs[:, i], labels[:, i]) for i in range(k)]
    prc = [_safe(auprc, probs[:, i], labels[:, i]) for i in range(k)]
    pos = [int((labels[:, i] > 0.5).sum()) for i in range(k)]
    neg = [int(labels.shape[0] - p) for p in pos]

    def macro(vals):
        try:
            return macro_average(vals)
        except UndefinedMetricError:
            return None

    return EvalReport(tasks, roc, prc, macro(roc), macro(prc), pos, neg)
