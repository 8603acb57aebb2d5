"""Loss, optimizer, splitting, the training loop and checkpoint files."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from grutv import autodiff as ad
from grutv.cells import Batch, CellParams, CellVariant, HeadParams, predict_head, run_batch
from grutv.data import canonicalize, compute_defaults
from grutv.errors import DataError, DimensionError, DivergenceError, UsageError
from grutv.metrics import evaluate

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
CHECKPOINT_FORMAT = "grutv-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    accumulation: int = 8
    min_epochs: int = 30
    patience: int = 3
    max_epochs: int = 100
    max_steps: int | None = None
    hidden_size: int = 16
    seed: int = 0
    fractions: tuple = (0.7, 0.15, 0.15)
    metric: str = "macro_auroc"
    eval_batch: int = 256
    max_substep: float | None = None
    update_bias: float = 0.0
    clip_norm: float | None = None

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if self.patience < 1:
            raise UsageError("patience must be at least 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise UsageError("clip_norm must be positive")
        if self.accumulation < 1:
            raise UsageError("accumulation must be at least 1")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9 or min(self.fractions) < 0:
            raise UsageError(f"split fractions must be three non-negative numbers summing to 1, got {self.fractions}")

    def to_dict(self):
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss and optimizer


def bce_loss(y, y_hat):
    """Binary cross-entropy averaged over tasks.

    ``y`` and ``y_hat`` are ``(K,)`` or ``(B, K)``; for a batch the per-row
    losses are summed.  Probabilities are clamped ``1e-12`` away from 0 and 1.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat_shape = y_hat.shape if hasattr(y_hat, "shape") else np.shape(y_hat)
    if y.shape != tuple(y_hat_shape):
        raise DimensionError(f"bce_loss: labels {list(y.shape)} vs predictions {list(y_hat_shape)}")
    k = y.shape[-1]
    p = ad.clamp(y_hat, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = ad.hadamard(y, ad.log(p))
    neg = ad.hadamard(1.0 - y, ad.log(ad.sub(np.ones(y.shape), p)))
    return ad.scale(-1.0 / k, ad.total(ad.add(pos, neg)))


def clip_gradients(grads, max_norm):
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def adam_step(params, grads, moments, config, step_index):
    """One bias-corrected adaptive-moment update.  Returns ``(params, moments)`` without mutating inputs."""
    if step_index < 1:
        raise UsageError("adam_step: step_index starts at 1")
    b1, b2 = config.beta1, config.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: gradient for {name} has shape {list(g.shape)}, expected {list(p.shape)}")
        m = b1 * moments["m"].get(name, 0.0) + (1.0 - b1) * g
        v = b2 * moments["v"].get(name, 0.0) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** step_index)
        v_hat = v / (1.0 - b2 ** step_index)
        new_p[name] = p - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
        new_m[name] = np.asarray(m, dtype=np.float64) * np.ones_like(p)
        new_v[name] = np.asarray(v, dtype=np.float64) * np.ones_like(p)
    return new_p, {"m": new_m, "v": new_v}


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class Model:
    variant: CellVariant
    cell: CellParams
    head: HeadParams
    defaults: np.ndarray

    def flat(self):
        out = {f"cell.{k}": v for k, v in self.cell.arrays().items()}
        out.update({f"head.{k}": v for k, v in self.head.arrays().items()})
        return out

    @classmethod
    def from_flat(cls, variant, flat, defaults):
        cell = CellParams.from_arrays({k[5:]: v for k, v in flat.items() if k.startswith("cell.")})
        head = HeadParams(*(np.asarray(flat[f"head.{k}"], dtype=np.float64) for k in ("W_out", "b_out")))
        return cls(CellVariant.parse(variant), cell, head, np.asarray(defaults, dtype=np.float64))


@dataclass
class Checkpoint:
    model: Model
    epoch: int
    val_metric: float
    config: dict = field(default_factory=dict)
    variables: list = field(default_factory=list)
    tasks: list = field(default_factory=list)

    def to_json(self):
        params = {
            name: {"shape": list(v.shape), "data": [float(x) for x in np.asarray(v).reshape(-1)]}
            for name, v in self.model.flat().items()
        }
        return json.dumps({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "variant": self.model.variant.value,
            "epoch": self.epoch,
            "val_metric": self.val_metric,
            "config": self.config,
            "variables": list(self.variables),
            "tasks": list(self.tasks),
            "defaults": [float(x) for x in self.model.defaults],
            "params": params,
        })

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
            if d.get("format") != CHECKPOINT_FORMAT:
                raise DataError("not a checkpoint file")
            if d.get("version") != CHECKPOINT_VERSION:
                raise DataError(f"unsupported checkpoint version {d.get('version')}")
            flat = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["params"].items()}
            model = Model.from_flat(d["variant"], flat, d["defaults"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed checkpoint ({exc})") from None
        return cls(model, d["epoch"], d["val_metric"], d.get("config", {}), d.get("variables", []), d.get("tasks", []))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    splits: dict
    stopped_epoch: int
    steps: int


# ---------------------------------------------------------------------------
# data handling


def split_indices(n, fractions=(0.7, 0.15, 0.15), seed=0):
    """Seeded shuffle cut into train/val/test; every non-zero fraction gets at least one item."""
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 7919])).permutation(n)
    n_train = int(math.floor(fractions[0] * n))
    n_val = int(math.floor(fractions[1] * n))
    if fractions[1] > 0 and n_val == 0 and n >= 3:
        n_val = 1
    if fractions[2] > 0 and n - n_train - n_val == 0 and n >= 3:
        n_train -= 1
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


def prepare(sequences, defaults):
    return [canonicalize(s, defaults) for s in sequences]


def predict(model, prepared, batch_size=256, max_substep=None):
    """Probabilities ``(n, K)`` for prepared sequences, evaluated without a tape."""
    out = []
    for start in range(0, len(prepared), batch_size):
        batch = Batch.from_sequences(prepared[start:start + batch_size])
        h = run_batch(model.variant, model.cell, batch, max_substep)
        out.append(predict_head(model.head, h).data)
    if not out:
        return np.zeros((0, model.head.n_tasks))
    return np.concatenate(out, axis=0)


def _labels(prepared):
    return np.stack([s.labels for s in prepared])


def evaluate_model(model, prepared, tasks=None, batch_size=256, max_substep=None):
    return evaluate(predict(model, prepared, batch_size, max_substep), _labels(prepared), tasks)


def validation_score(model, prepared, config):
    """Macro AUROC on the validation set; minus the mean loss if no task has both classes."""
    probs = predict(model, prepared, config.eval_batch, config.max_substep)
    labels = _labels(prepared)
    report = evaluate(probs, labels)
    if report.macro_auroc is not None:
        return report.macro_auroc
    p = np.clip(probs, PROB_CLAMP, 1 - PROB_CLAMP)
    return -float(np.mean(-(labels * np.log(p) + (1 - labels) * np.log(1 - p))))


def _batch_loss(model, batch, config, with_grad=True):
    tape = ad.Tape()
    with tape:
        flat = {k: tape.leaf(v) for k, v in model.flat().items()}
        cell = CellParams(**{k[5:]: v for k, v in flat.items() if k.startswith("cell.")})
        head = HeadParams(flat["head.W_out"], flat["head.b_out"])
        h = run_batch(model.variant, cell, batch, config.max_substep)
        loss = bce_loss(batch.labels, predict_head(head, h))
    value = float(loss.data)
    grads = ad.backward(tape, 1.0, loss) if with_grad else None
    return value, {k: grads[t.node] for k, t in flat.items()} if with_grad else None


# ---------------------------------------------------------------------------
# training loop


def init_model(variant, n_vars, n_tasks, defaults, config):
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 104729]))
    cell = CellParams.init(variant, n_vars, config.hidden_size, rng, config.update_bias)
    head = HeadParams.init(config.hidden_size, n_tasks, rng)
    return Model(CellVariant.parse(variant), cell, head, np.asarray(defaults, dtype=np.float64))


def fit(variant, train_seqs, val_seqs, config, *, val_metric=None, model=None, tasks=None, variables=None):
    """Train on prepared-from-raw sequences with early stopping; see :func:`train`."""
    variant = CellVariant.parse(variant)
    train_seqs, val_seqs = list(train_seqs), list(val_seqs)
    if not train_seqs or not val_seqs:
        raise UsageError("training and validation splits must be non-empty")
    if any(s.labels is None for s in train_seqs + val_seqs):
        raise DataError("every sequence needs labels for training")
    n_vars = train_seqs[0].n_vars
    n_tasks = len(train_seqs[0].labels)
    defaults = compute_defaults(train_seqs, n_vars)
    prep_train = prepare(train_seqs, defaults)
    prep_val = prepare(val_seqs, defaults)
    if model is None:
        model = init_model(variant, n_vars, n_tasks, defaults, config)
    else:
        model = Model(model.variant, model.cell, model.head, defaults)
    score = val_metric or (lambda epoch, m: validation_score(m, prep_val, config))

    params = model.flat()
    moments = {"m": {}, "v": {}}
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 15485863]))
    steps = 0
    history = []
    best = score(0, model)
    history.append({"epoch": 0, "loss": None, "val_metric": best, "steps": 0})
    best_ckpt = Checkpoint(model, 0, best, config.to_dict(), list(variables or []), list(tasks or []))
    stale = 0
    epoch = 0
    budget = math.inf if config.max_steps is None else config.max_steps
    while epoch < config.max_epochs and steps < budget:
        epoch += 1
        order = rng.permutation(len(prep_train))
        losses = []
        for start in range(0, len(order), config.accumulation):
            if steps >= budget:
                break
            group = [prep_train[i] for i in order[start:start + config.accumulation]]
            batch = Batch.from_sequences(group)
            value, grads = _batch_loss(model, batch, config)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(f"non-finite loss in epoch {epoch}", epoch)
            steps += 1
            grads = {k: g / len(group) for k, g in grads.items()}
            if config.clip_norm is not None:
                grads = clip_gradients(grads, config.clip_norm)
            params, moments = adam_step(params, grads, moments, config, steps)
            model = Model.from_flat(variant, params, defaults)
            losses.append(value)
        metric = score(epoch, model)
        mean_loss = float(sum(losses) / len(prep_train)) if losses else float("nan")
        history.append({"epoch": epoch, "loss": mean_loss, "val_metric": metric, "steps": steps})
        log.info("%s epoch %d loss %.5f val %.5f", variant.value, epoch, mean_loss, metric)
        if metric > best:
            best = metric
            best_ckpt = Checkpoint(model, epoch, metric, config.to_dict(), list(variables or []), list(tasks or []))
            stale = 0
        elif epoch > config.min_epochs:
            stale += 1
        if epoch > config.min_epochs and stale >= config.patience:
            break
    return best_ckpt, history, epoch, steps


def train(variant, corpus, config, *, val_metric=None):
    """Split ``corpus``, train ``variant`` and return the best-validation checkpoint.

    Training stops once more than ``min_epochs`` epochs have run and
    ``patience`` consecutive epochs past that point failed to improve the
    validation score.  ``val_metric(epoch, model)`` overrides the score.
    """
    config = config if isinstance(config, TrainConfig) else TrainConfig.from_dict(config)
    splits = split_indices(len(corpus), config.fractions, config.seed)
    seqs = list(corpus)
    ckpt, history, epoch, steps = fit(
        variant,
        [seqs[i] for i in splits["train"]],
        [seqs[i] for i in splits["val"]],
        config,
        val_metric=val_metric,
        tasks=getattr(corpus, "tasks", None),
        variables=getattr(corpus, "variables", None),
    )
    return TrainResult(ckpt, history, {k: v.tolist() for k, v in splits.items()}, epoch, steps)
