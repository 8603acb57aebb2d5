"""Finite-difference verification of the full loss for every cell variant."""

from __future__ import annotations

import numpy as np

from grutv.autodiff import grad_check
from grutv.cells import CellParams, CellVariant, HeadParams, predict_head, run_sequence
from grutv.data import Sequence, canonicalize
from grutv.training import bce_loss


def random_sequence(rng, d_r, length, n_tasks=2, observed=0.6):
    gaps = rng.uniform(0.1, 2.0, size=length - 1)
    t = rng.uniform(0.0, 1.0) + np.concatenate([[0.0], np.cumsum(gaps)])
    values = rng.normal(size=(length, d_r))
    values[rng.random((length, d_r)) > observed] = np.nan
    labels = (rng.random(n_tasks) < 0.5).astype(float)
    return Sequence.from_values("gc", t, values, labels)


def random_model(variant, d_r, d_h, n_tasks, rng):
    """Initialised parameters with non-zero biases, so no rectifier sits exactly on its kink."""
    cell = CellParams.init(variant, d_r, d_h, rng)
    arrays = {k: v + (rng.normal(0.0, 0.5, size=v.shape) if k.startswith("b_") else 0.0)
              for k, v in cell.arrays().items()}
    head = HeadParams.init(d_h, n_tasks, rng)
    head = HeadParams(head.W_out, rng.normal(0.0, 0.5, size=n_tasks))
    return CellParams.from_arrays(arrays), head


def check_cell(variant, d_r, d_h, seed, length=None, epsilon=1e-5, tolerance=1e-4, n_tasks=2):
    """grad_check of BCE(head(run_sequence(...))) for one random draw.

    Returns the :class:`~grutv.autodiff.GradReport`.
    """
    variant = CellVariant.parse(variant)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), d_r, d_h, list(CellVariant).index(variant)]))
    if length is None:
        length = int(rng.integers(1, 11))
    seq = random_sequence(rng, d_r, length, n_tasks)
    prepared = canonicalize(seq, rng.normal(size=d_r))
    cell, head = random_model(variant, d_r, d_h, n_tasks, rng)
    cell_names = list(cell.arrays())
    point = {f"cell_{k}": v for k, v in cell.arrays().items()}
    point.update({"head_W_out": head.W_out, "head_b_out": head.b_out})

    def loss(**leaves):
        p = CellParams(**{k: leaves[f"cell_{k}"] for k in cell_names})
        hp = HeadParams(leaves["head_W_out"], leaves["head_b_out"])
        h = run_sequence(variant, p, prepared)
        return bce_loss(prepared.labels, predict_head(hp, h))

    return grad_check(loss, point, epsilon=epsilon, tolerance=tolerance)
