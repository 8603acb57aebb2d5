"""Synthetic irregularly sampled, partially observed multivariate sequences.

Each sequence follows a latent Ornstein-Uhlenbeck process (a linear-Gaussian
system, sampled exactly at arbitrary times) that relaxes from its initial
state toward a per-sequence set point.  Observations are noisy linear
readouts of the latent state.  Record gaps are mostly exactly one hour with
a heavier tail (optionally with a per-sequence share of one-hour gaps); each
variable goes missing independently at its own rate.

Labels threshold functionals of the continuous latent path:

* exposure: hours with latent 0 above ``exposure_level``, above the median,
* stay: hours with latent 1 above the low ``stay_level``, above the median
  (close to a length-of-stay label),
* level: time-average of latent 2 is positive.

The first two count elapsed hours, so a model that only sees the order of
records has to infer durations from record counts, which thinning makes noisy.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from grutv.data import Corpus, Sequence
from grutv.errors import UsageError


@dataclass
class SynthConfig:
    n_sequences: int = 2000
    n_vars: int = 6
    latent_dim: int = 3
    mean_records: int = 24
    min_records: int = 4
    dominant_gap: float = 1.0
    dominant_prob: float = 0.85
    tail_min: float = 1.5
    tail_mean: float = 1.5
    missing_rates: list = field(default_factory=lambda: [0.5, 0.6, 0.7, 0.75, 0.8, 0.9])
    n_tasks: int = 3
    relax_rate: float = 0.15
    process_noise: float = 0.25
    obs_noise: float = 0.1
    gap_concentration: float = 0.0
    exposure_level: float = 0.0
    exposure_spread: float = 0.3
    stay_level: float = -1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_sequences < 1 or self.n_vars < 1 or self.latent_dim < 1 or self.mean_records < 1:
            raise UsageError("synthetic corpus sizes must be at least 1")
        if self.n_tasks < 1 or self.n_tasks > 3:
            raise UsageError("n_tasks must be between 1 and 3")
        if self.latent_dim < self.n_tasks:
            raise UsageError("latent_dim must be at least n_tasks")
        rates = np.asarray(self.missing_rates, dtype=np.float64)
        if rates.size == 1:
            rates = np.full(self.n_vars, float(rates))
        if rates.shape != (self.n_vars,):
            raise UsageError(f"need one missing rate per variable ({self.n_vars}), got {rates.size}")
        if np.any(rates < 0) or np.any(rates >= 1):
            raise UsageError("missing rates must lie in [0, 1)")
        if self.gap_concentration < 0:
            raise UsageError("gap_concentration must be non-negative")
        if not 0.0 <= self.dominant_prob <= 1.0:
            raise UsageError("dominant_prob must lie in [0, 1]")
        self.missing_rates = [float(r) for r in rates]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown synthetic options: {sorted(unknown)}")
        return cls(**d)


def _ou_path(rng, z0, mu, times, lam, sigma):
    """Exact OU samples at ``times`` (z0 at times[0])."""
    z = np.empty((len(times), len(z0)))
    z[0] = z0
    for i in range(1, len(times)):
        d = times[i] - times[i - 1]
        a = math.exp(-lam * d)
        sd = sigma * math.sqrt((1.0 - a * a) / (2.0 * lam))
        z[i] = mu + a * (z[i - 1] - mu) + sd * rng.standard_normal(len(z0))
    return z


def _gaps(rng, cfg, n):
    # each sequence has its own share of dominant gaps, Beta-distributed around dominant_prob
    share = cfg.dominant_prob
    if cfg.gap_concentration > 0 and 0.0 < share < 1.0:
        share = rng.beta(share * cfg.gap_concentration, (1.0 - share) * cfg.gap_concentration)
    tail = cfg.tail_min + rng.exponential(cfg.tail_mean, size=n)
    tail = np.round(tail * 12.0) / 12.0  # five-minute resolution
    return np.where(rng.random(n) < share, cfg.dominant_gap, tail)


def gen_synth(cfg):
    """Generate a labelled corpus; fully determined by ``cfg.seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 2718]))
    L, D = cfg.latent_dim, cfg.n_vars
    # readout: each latent drives two variables strongly, everything weakly
    readout = 0.3 * rng.standard_normal((D, L))
    for d in range(D):
        readout[d, d % L] += 1.0
    offsets = rng.normal(0.0, 0.5, size=D)
    rates = np.asarray(cfg.missing_rates)
    fine = 0.25  # hours between hidden fine-grid samples used for the labels
    sequences, raw, functionals = [], [], []
    for s in range(cfg.n_sequences):
        n = max(cfg.min_records, int(rng.poisson(cfg.mean_records)))
        times = np.concatenate([[0.0], np.cumsum(_gaps(rng, cfg, n - 1))])
        times = times + float(np.round(rng.uniform(0.0, 1.0) * 12.0) / 12.0)
        mu = rng.standard_normal(L)
        mu[:2] *= cfg.exposure_spread  # a narrow set point leaves exposure to be driven by duration
        z0 = rng.standard_normal(L)
        # the hidden path lives on a fine grid that contains every record time
        grid = np.union1d(times, np.arange(times[0], times[-1], fine))
        z = _ou_path(rng, z0, mu, grid, cfg.relax_rate, cfg.process_noise)
        at_records = z[np.searchsorted(grid, times)]
        values = at_records @ readout.T + offsets + cfg.obs_noise * rng.standard_normal((n, D))
        values[rng.random((n, D)) < rates] = np.nan
        weights = np.diff(grid)
        exposure = float(np.sum(weights * (z[:-1, 0] > cfg.exposure_level)))
        stay = float(np.sum(weights * (z[:-1, 1 % L] > cfg.stay_level)))
        level = float(np.sum(weights * z[:-1, 2 % L]) / max(weights.sum(), 1e-12))
        functionals.append([exposure, stay, level])
        raw.append((f"s{s:05d}", times, values))
    functionals = np.array(functionals)
    # the two hour counts are cut at their medians, the average at zero
    cuts = [np.median(functionals[:, 0]), np.median(functionals[:, 1]), 0.0]
    for (sid, times, values), f in zip(raw, functionals):
        labels = np.array([float(f[k] > cuts[k]) for k in range(cfg.n_tasks)])
        sequences.append(Sequence.from_values(sid, times, values, labels))
    variables = [f"x{d + 1}" for d in range(D)]
    tasks = ["exposure", "stay", "level"][: cfg.n_tasks]
    return Corpus(sequences, variables, tasks)
