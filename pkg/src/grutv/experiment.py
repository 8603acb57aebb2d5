"""Full-versus-thinned comparison grid: variants x sampling conditions x seeds.

Every (variant, condition, seed) cell is an independent job: thin the corpus
(unless the rate is 1), split, train, and score the test split.  Per-cell
means over seeds form a results table with one row per variant and
condition.  Outputs contain no timestamps or timings, so two runs of the
same spec are byte-identical.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from grutv.cells import CellVariant
from grutv.data import load_corpus
from grutv.errors import GrutvError, UsageError
from grutv.sampling import apply_selection, build_sampling_dict, sample_sequence
from grutv.synth import SynthConfig, gen_synth
from grutv.training import TrainConfig, evaluate_model, prepare, train

log = logging.getLogger(__name__)


def default_train_config():
    """Training settings used by the synthetic comparison.

    Every variant gets the same settings.  A positive update-gate bias and
    gradient clipping keep the single Euler step of the time-aware cells from
    overshooting on the long gaps that thinning creates.
    """
    return TrainConfig(lr=2e-3, accumulation=16, update_bias=3.0, clip_norm=1.0)


@dataclass
class Condition:
    rate: float = 1.0
    mode: str = "uniform"

    def __post_init__(self):
        self.rate = float(self.rate)
        if not 0.0 < self.rate <= 1.0:
            raise UsageError(f"condition rate must be in (0, 1], got {self.rate}")
        if self.mode not in ("uniform", "inverse"):
            raise UsageError(f"unknown sampling mode {self.mode!r}")

    @property
    def label(self):
        pct = f"{self.rate * 100:g}%"
        return pct if self.rate == 1.0 or self.mode == "uniform" else f"{pct} {self.mode}"

    def to_dict(self):
        return {"rate": self.rate, "mode": self.mode}


@dataclass
class ExperimentSpec:
    corpus: str | None = None
    synth: SynthConfig | None = None
    variants: list = field(default_factory=lambda: ["gru", "gru-t", "gru-tv"])
    conditions: list = field(default_factory=lambda: [Condition(1.0), Condition(0.5)])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    train: TrainConfig = field(default_factory=default_train_config)
    bucket_width: float = 1.0

    def __post_init__(self):
        if self.corpus is None and self.synth is None:
            self.synth = SynthConfig()
        if isinstance(self.synth, dict):
            self.synth = SynthConfig.from_dict(self.synth)
        if isinstance(self.train, dict):
            base = default_train_config().to_dict()
            base.update(self.train)
            self.train = TrainConfig.from_dict(base)
        self.variants = [CellVariant.parse(v).value for v in self.variants]
        self.conditions = [c if isinstance(c, Condition) else _condition(c) for c in self.conditions]
        self.seeds = [int(s) for s in self.seeds]
        if not self.variants:
            raise UsageError("experiment needs at least one variant")
        if not self.conditions:
            raise UsageError("experiment needs at least one condition")
        if not self.seeds:
            raise UsageError("experiment needs at least one seed")

    def to_dict(self):
        return {
            "corpus": self.corpus,
            "synth": self.synth.to_dict() if self.synth is not None and self.corpus is None else None,
            "variants": list(self.variants),
            "conditions": [c.to_dict() for c in self.conditions],
            "seeds": list(self.seeds),
            "train": self.train.to_dict(),
            "bucket_width": self.bucket_width,
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown experiment options: {sorted(unknown)}")
        return cls(**d)


def _condition(c):
    if isinstance(c, (int, float)):
        return Condition(float(c))
    if isinstance(c, dict):
        unknown = set(c) - {"rate", "mode"}
        if unknown:
            raise UsageError(f"unknown condition options: {sorted(unknown)}")
        return Condition(**c)
    raise UsageError(f"cannot read condition {c!r}")


@dataclass
class ExperimentResult:
    spec: dict
    tasks: list
    runs: list
    grid: list

    def to_dict(self):
        return {"spec": self.spec, "tasks": self.tasks, "grid": self.grid, "runs": self.runs}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def cell(self, variant, condition):
        for row in self.grid:
            if row["variant"] == CellVariant.parse(variant).value and row["condition"] == condition:
                return row
        raise KeyError((variant, condition))

    def to_text(self):
        return format_grid(self.grid, self.tasks)


def _thin(corpus, cond, seed, bucket_width):
    if cond.rate >= 1.0:
        return corpus
    sdict = build_sampling_dict(corpus, bucket_width) if cond.mode == "inverse" else None
    return apply_selection(corpus, sample_sequence(corpus, cond.mode, cond.rate, sdict, seed))


def run_cell(variant, corpus, cond, seed, config, bucket_width=1.0):
    """Train and test one grid cell; failures are returned, not raised."""
    run = {"variant": CellVariant.parse(variant).value, "condition": cond.label, "seed": seed}
    try:
        thinned = _thin(corpus, cond, seed, bucket_width)
        cfg = TrainConfig.from_dict({**config.to_dict(), "seed": seed})
        result = train(variant, thinned, cfg)
        seqs = list(thinned)
        model = result.checkpoint.model
        test = prepare([seqs[i] for i in result.splits["test"]], model.defaults)
        report = evaluate_model(model, test, list(thinned.tasks), cfg.eval_batch, cfg.max_substep)
    except GrutvError as exc:
        log.warning("cell %s %s seed %d failed: %s", run["variant"], cond.label, seed, exc)
        run.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        return run
    run.update(
        status="ok",
        auroc=report.auroc,
        auprc=report.auprc,
        macro_auroc=report.macro_auroc,
        macro_auprc=report.macro_auprc,
        best_epoch=result.checkpoint.epoch,
        stopped_epoch=result.stopped_epoch,
        records_kept=int(sum(len(s) for s in thinned)),
    )
    return run


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(runs, variants, conditions, n_tasks):
    """Per (variant, condition) means over the successful seeds."""
    grid = []
    for v in variants:
        for c in conditions:
            cell = [r for r in runs if r["variant"] == v and r["condition"] == c]
            ok = [r for r in cell if r["status"] == "ok"]
            row = {"variant": v, "condition": c, "n_ok": len(ok), "n_failed": len(cell) - len(ok)}
            if ok:
                row["status"] = "ok" if len(ok) == len(cell) else "partial"
                row["auroc"] = [_mean([r["auroc"][k] for r in ok]) for k in range(n_tasks)]
                row["auprc"] = [_mean([r["auprc"][k] for r in ok]) for k in range(n_tasks)]
                row["macro_auroc"] = _mean([r["macro_auroc"] for r in ok])
                row["macro_auprc"] = _mean([r["macro_auprc"] for r in ok])
            else:
                row.update(status="failed", auroc=[None] * n_tasks, auprc=[None] * n_tasks,
                           macro_auroc=None, macro_auprc=None)
            grid.append(row)
    return grid


def format_grid(grid, tasks):
    """Aligned text: one line per variant and condition, AUROC per task then macro AUROC/AUPRC."""
    head = ["variant", "condition"] + list(tasks) + ["macro_auroc", "macro_auprc", "seeds"]
    rows = []
    for r in grid:
        fmt = (lambda v: "FAILED" if v is None else f"{v:.4f}")
        seeds = f"{r['n_ok']}/{r['n_ok'] + r['n_failed']}"
        rows.append([r["variant"], r["condition"]] + [fmt(v) for v in r["auroc"]]
                    + [fmt(r["macro_auroc"]), fmt(r["macro_auprc"]), seeds])
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(head), line(["-" * w for w in widths])] + [line(r) for r in rows]
    return "\n".join(out) + "\n"


def load_spec_corpus(spec):
    if spec.corpus is not None:
        return load_corpus(spec.corpus)
    return gen_synth(spec.synth)


def run_experiment(spec, corpus=None):
    """Run every cell of ``spec`` and return an :class:`ExperimentResult`."""
    spec = spec if isinstance(spec, ExperimentSpec) else ExperimentSpec.from_dict(spec)
    corpus = corpus if corpus is not None else load_spec_corpus(spec)
    runs = []
    for variant in spec.variants:
        for cond in spec.conditions:
            for seed in spec.seeds:
                log.info("cell %s %s seed %d", variant, cond.label, seed)
                runs.append(run_cell(variant, corpus, cond, seed, spec.train, spec.bucket_width))
    labels = [c.label for c in spec.conditions]
    grid = summarize(runs, spec.variants, labels, len(corpus.tasks))
    return ExperimentResult(spec.to_dict(), list(corpus.tasks), runs, grid)
